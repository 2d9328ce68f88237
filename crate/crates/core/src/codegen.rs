//! Template instantiation of the DPU program and its pseudo-source rendering.
//!
//! Every DPU runs the same [`DpuProgram`]; what differs between DPUs (the
//! partition bounds and per-pass element counts) is carried in
//! [`DpuProgram::args`] and never appears in the rendered text.
//!
//! The rendered pseudo-source is the [`SKELETON`] template with each
//! `{{hole}}` replaced. Its layout is described in `docs/pseudo-source.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::kernel::{self, BufferId, ScalarType};
use crate::pipeline::{AccType, Pipeline, ReduceStep, Reducer, Stage};
use crate::planner::{ExecutionPlan, PassCounts, PassOutput, Region, WramLayout};

/// Fixed IRAM cost of the program skeleton, in bytes.
pub const SKELETON_IRAM_BYTES: u64 = 2048;
/// IRAM cost of one kernel expression node, in bytes.
pub const IRAM_BYTES_PER_NODE: u64 = 16;

/// The base DPU program. Holes are `{{name}}`.
pub const SKELETON: &str = "\
// pimflow dpu program
// plan {{fingerprint}}
// one image for all DPUs; start, count, halo and pass counts are per-DPU arguments
program tasklets={{tasklets}} iram_estimate={{iram}}

mram {
{{mram}}}

wram {
{{wram}}}

main {
{{staging}}{{passes}}}
{{relay}}";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodegenError {
    #[error("program needs {estimate} bytes of IRAM, DPUs have {capacity}")]
    IramOverflow { estimate: u64, capacity: u64 },
    #[error("plan does not match the pipeline: {0}")]
    PlanMismatch(String),
    #[error("template hole `{0}` was left unfilled")]
    UnfilledHole(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PassKind {
    Elementwise,
    Reduce { stage: usize },
    Window { stage: usize, size: usize },
    Group { stage: usize, size: usize },
}

impl PassKind {
    pub fn stage(&self) -> Option<usize> {
        match *self {
            PassKind::Elementwise => None,
            PassKind::Reduce { stage } | PassKind::Window { stage, .. } | PassKind::Group { stage, .. } => Some(stage),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PassProgram {
    pub elementwise: Vec<usize>,
    pub kind: PassKind,
    /// One region per input stream of the pass.
    pub inputs: Vec<Region>,
    pub output: Region,
    pub output_kind: PassOutput,
    pub tile_positions: u64,
    pub overlap: u64,
    pub wram: WramLayout,
}

/// A broadcast buffer copied into WRAM before the first pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BroadcastSlot {
    pub id: BufferId,
    pub ty: ScalarType,
    pub len: u64,
    pub mram_offset: u64,
    pub wram_offset: u64,
}

/// Combine of relayed partials on DPU 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RelayProgram {
    pub region: Region,
    pub slots: u64,
    pub stage: usize,
    pub acc: AccType,
    pub wram_offset: u64,
}

/// Per-DPU parameters of the shared program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DpuArgs {
    pub start: u64,
    pub count: u64,
    pub right_halo: u64,
    pub passes: Vec<PassCounts>,
}

#[derive(Debug, Clone)]
pub struct DpuProgram<'p> {
    pub pipeline: &'p Pipeline,
    pub fingerprint: String,
    pub tasklets: u32,
    pub mram: Vec<Region>,
    pub broadcasts: Vec<BroadcastSlot>,
    pub passes: Vec<PassProgram>,
    pub relay: Option<RelayProgram>,
    /// Indexed by DPU id.
    pub args: Vec<DpuArgs>,
    pub iram_estimate: u64,
}

/// Skeleton bytes plus 16 bytes per node of every kernel the DPUs evaluate.
pub fn iram_estimate(p: &Pipeline, stages: impl IntoIterator<Item = usize>) -> u64 {
    let nodes: usize = stages.into_iter().flat_map(|i| p.stages()[i].kernels()).map(|k| k.node_count()).sum();
    SKELETON_IRAM_BYTES + IRAM_BYTES_PER_NODE * nodes as u64
}

/// Fills the skeleton with the plan's passes. `plan` must come from `p`.
pub fn instantiate_template<'p>(plan: &ExecutionPlan, p: &'p Pipeline) -> Result<DpuProgram<'p>, CodegenError> {
    let mismatch = |m: &str| CodegenError::PlanMismatch(m.to_string());
    let nstages = p.stages().len();
    if plan.passes.iter().flat_map(|f| f.stages()).any(|i| i >= nstages) {
        return Err(mismatch("pass references a stage the pipeline does not have"));
    }
    if plan.layout.inputs.len() != p.inputs().len() || plan.layout.pass_outputs.len() != plan.passes.len() {
        return Err(mismatch("MRAM layout does not cover every stream and pass"));
    }
    if plan.tiles.len() != plan.passes.len() || plan.wram.len() != plan.passes.len() {
        return Err(mismatch("tile schedule does not cover every pass"));
    }

    let mut passes = Vec::with_capacity(plan.passes.len());
    for (k, f) in plan.passes.iter().enumerate() {
        let kind = match f.blocking.map(|i| (i, &p.stages()[i])) {
            None => PassKind::Elementwise,
            Some((stage, Stage::Reduce(_))) => PassKind::Reduce { stage },
            Some((stage, Stage::Window { size, .. })) => PassKind::Window { stage, size: *size },
            Some((stage, Stage::Group { size, .. })) => PassKind::Group { stage, size: *size },
            Some(_) => return Err(mismatch("blocking position holds an elementwise stage")),
        };
        let inputs = if k == 0 { plan.layout.inputs.clone() } else { vec![plan.layout.pass_outputs[k - 1].clone()] };
        let overlap = match kind {
            PassKind::Window { size, .. } => size as u64 - 1,
            _ => 0,
        };
        passes.push(PassProgram {
            elementwise: f.elementwise.clone(),
            kind,
            inputs,
            output: plan.layout.pass_outputs[k].clone(),
            output_kind: f.output,
            tile_positions: plan.tiles[k].tile_positions,
            overlap,
            wram: plan.wram[k].clone(),
        });
    }

    let wram_of: BTreeMap<BufferId, u64> = plan.wram_broadcasts.iter().copied().collect();
    let mut staged_end = 0;
    let broadcasts: Vec<BroadcastSlot> = plan
        .layout
        .broadcasts
        .iter()
        .map(|(id, region)| {
            let slot = BroadcastSlot {
                id: *id,
                ty: region.ty,
                len: plan.shape.broadcasts.get(id).copied().unwrap_or(0),
                mram_offset: region.offset,
                wram_offset: wram_of.get(id).copied().unwrap_or(0),
            };
            staged_end = staged_end.max(slot.wram_offset + region.bytes);
            slot
        })
        .collect();

    let relay = match (&plan.layout.relay, plan.passes.last()) {
        (Some(region), Some(f)) => match (f.blocking, f.output) {
            (Some(stage), PassOutput::Partial(acc)) => Some(RelayProgram {
                region: region.clone(),
                slots: plan.transfer.working_dpus as u64,
                stage,
                acc,
                wram_offset: staged_end,
            }),
            _ => return Err(mismatch("relay region without a partial-producing pass")),
        },
        _ => None,
    };

    let mut mram: Vec<Region> = plan.layout.inputs.clone();
    mram.extend(plan.layout.broadcasts.iter().map(|(_, r)| r.clone()));
    mram.extend(plan.layout.pass_outputs.iter().cloned());
    mram.extend(plan.layout.relay.iter().cloned());

    let args = plan
        .partition
        .parts
        .iter()
        .zip(&plan.counts)
        .map(|(d, c)| DpuArgs { start: d.start, count: d.count, right_halo: d.right_halo, passes: c.clone() })
        .collect();

    let estimate = iram_estimate(p, plan.passes.iter().flat_map(|f| f.stages()));
    if estimate > plan.iram_bytes {
        return Err(CodegenError::IramOverflow { estimate, capacity: plan.iram_bytes });
    }
    Ok(DpuProgram {
        pipeline: p,
        fingerprint: plan.fingerprint(),
        tasklets: plan.tasklets,
        mram,
        broadcasts,
        passes,
        relay,
        args,
        iram_estimate: estimate,
    })
}

/// Deterministic pseudo-source of a program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedSource {
    pub fingerprint: String,
    pub text: String,
}

/// Replaces every `{{name}}` in `template`; an unknown or unfilled hole is an error.
pub fn fill(template: &str, holes: &BTreeMap<&str, String>) -> Result<String, CodegenError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(at) = rest.find("{{") {
        out.push_str(&rest[..at]);
        let after = &rest[at + 2..];
        let end = after.find("}}").ok_or_else(|| CodegenError::UnfilledHole(after.to_string()))?;
        let name = &after[..end];
        out.push_str(holes.get(name).ok_or_else(|| CodegenError::UnfilledHole(name.to_string()))?);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

fn output_note(kind: PassOutput) -> String {
    match kind {
        PassOutput::Dense => "dense".into(),
        PassOutput::Compacted => "count word + survivors".into(),
        PassOutput::Partial(AccType::Scalar(t)) => format!("partial {t}"),
        PassOutput::Partial(AccType::Array { elem, len }) => format!("partial {elem}[{len}]"),
    }
}

fn reducer_lines(out: &mut String, indent: &str, r: &Reducer, acc: &str, element: &str, stage: usize) {
    match &r.step {
        ReduceStep::Fold(step) => {
            let _ = writeln!(out, "{indent}{acc} = {}    // stage {stage}: in0 = {acc}, in1 = {element}", kernel::render(step));
        }
        ReduceStep::Scatter { index, update } => {
            let _ = writeln!(out, "{indent}slot = {}    // stage {stage}: in0 = {element}", kernel::render(index));
            let _ = writeln!(
                out,
                "{indent}{acc}[slot] = {}    // in0 = {acc}[slot], in1 = {element}",
                kernel::render(update)
            );
        }
    }
}

fn render_chain(out: &mut String, indent: &str, p: &Pipeline, stages: &[usize], cont: &str) {
    for &i in stages {
        match &p.stages()[i] {
            Stage::Map(f) => {
                let _ = writeln!(out, "{indent}in0 = {}    // stage {i}: map", kernel::render(f));
            }
            Stage::Filter(f) => {
                let _ = writeln!(out, "{indent}if !{} {cont}    // stage {i}: filter", kernel::render(f));
            }
            _ => {}
        }
    }
}

fn render_pass(out: &mut String, p: &Pipeline, k: usize, pass: &PassProgram, tasklets: u32) {
    let stages = p.stages();
    let names: Vec<&str> = pass.elementwise.iter().chain(pass.kind.stage().as_ref()).map(|&i| stages[i].name()).collect();
    let _ = writeln!(out, "  pass {k} [{}] -> {} ({})", names.join(", "), pass.output.name, output_note(pass.output_kind));
    let _ = writeln!(out, "    tile_positions = {} overlap = {}", pass.tile_positions, pass.overlap);
    let reducer = pass.kind.stage().and_then(|i| stages[i].reducer());
    if let PassKind::Reduce { .. } = pass.kind {
        let r = reducer.expect("reduce stage");
        let _ = writeln!(out, "    acc[0..{tasklets}] = identity {}", r.identity);
    }
    if pass.output_kind == PassOutput::Compacted {
        let _ = writeln!(out, "    count = 0");
    }
    let _ = writeln!(out, "    for tile in tiles(args.pass[{k}].positions, tile_positions) {{");
    for (s, (region, at)) in pass.inputs.iter().zip(&pass.wram.inputs).enumerate() {
        let w = region.ty.width();
        let _ = writeln!(
            out,
            "      dma mram[{} + tile.first * {w}] -> wram[{at}], tile.elements * {w} bytes    // stream {s}",
            region.name
        );
    }
    let _ = writeln!(out, "      base = args.pass[{k}].base_index + tile.first");
    let chunk = format!("// tasklet t of {tasklets}: [t*q + min(t, r), +q + (t < r)), q = len / {tasklets}, r = len % {tasklets}");
    match pass.kind {
        PassKind::Elementwise | PassKind::Reduce { .. } => {
            let _ = writeln!(out, "      parallel e in 0..tile.positions    {chunk}");
            let _ = writeln!(out, "        gidx = base + e");
            render_chain(out, "        ", p, &pass.elementwise, "next e");
            match (reducer, pass.kind.stage()) {
                (Some(r), Some(i)) => reducer_lines(out, "        ", r, "acc[t]", "in0", i),
                _ if pass.output_kind == PassOutput::Compacted => {
                    let _ = writeln!(out, "        emit in0 at count++");
                }
                _ => {
                    let _ = writeln!(out, "        out[e] = in0");
                }
            }
        }
        PassKind::Window { size, stage } | PassKind::Group { size, stage } => {
            let r = reducer.expect("blocking stage");
            let _ = writeln!(out, "      parallel e in 0..tile.elements    {chunk}");
            let _ = writeln!(out, "        gidx = base + e");
            render_chain(out, "        ", p, &pass.elementwise, "next e");
            let _ = writeln!(out, "        mapped[e] = in0");
            let (what, span) = match pass.kind {
                PassKind::Window { .. } => ("tile.positions", format!("j..j+{size}")),
                _ => ("ceil(tile.elements / {size})", format!("j*{size}..min((j+1)*{size}, tile.elements)")),
            };
            let what = what.replace("{size}", &size.to_string());
            let _ = writeln!(out, "      parallel j in 0..{what}    {chunk}");
            let _ = writeln!(out, "        acc = identity {}", r.identity);
            let _ = writeln!(out, "        for e in {span}");
            let _ = writeln!(out, "          gidx = base + e");
            reducer_lines(out, "          ", r, "acc", "mapped[e]", stage);
            let _ = writeln!(out, "        out[j] = acc");
        }
    }
    match pass.output_kind {
        PassOutput::Dense => {
            let w = pass.output.ty.width();
            let first = match pass.kind {
                PassKind::Group { size, .. } => format!("tile.first / {size}"),
                _ => "tile.first".into(),
            };
            let _ = writeln!(out, "      dma wram[{}] -> mram[{} + ({first}) * {w}]", pass.wram.output, pass.output.name);
        }
        PassOutput::Compacted => {
            let _ = writeln!(out, "      flush whole 8-byte units of wram[{}] -> mram[{}], keep the rest", pass.wram.output, pass.output.name);
        }
        PassOutput::Partial(_) => {}
    }
    let _ = writeln!(out, "    }}");
    match pass.output_kind {
        PassOutput::Compacted => {
            let _ = writeln!(out, "    flush remainder padded to 8 bytes; mram[{}] = count", pass.output.name);
        }
        PassOutput::Partial(_) => {
            let r = reducer.expect("reduce stage");
            let _ = writeln!(out, "    acc = fold(acc[0..{tasklets}], {})    // in0 = acc, in1 = acc[t]", kernel::render(&r.combine));
            let _ = writeln!(out, "    dma wram[{}] -> mram[{}]", pass.wram.accumulators, pass.output.name);
        }
        PassOutput::Dense => {}
    }
}

pub fn render_source(prog: &DpuProgram<'_>) -> RenderedSource {
    let mut holes = BTreeMap::new();
    holes.insert("fingerprint", prog.fingerprint.clone());
    holes.insert("tasklets", prog.tasklets.to_string());
    holes.insert("iram", format!("{}B", prog.iram_estimate));

    let mut mram = String::new();
    for r in &prog.mram {
        let kind = if r.variable { " counted" } else { "" };
        let _ = writeln!(mram, "  {} {} @{} +{}{kind}", r.name, r.ty, r.offset, r.bytes);
    }
    holes.insert("mram", mram);

    let mut wram = String::new();
    for b in &prog.broadcasts {
        let _ = writeln!(wram, "  {} {}[{}] @{}", b.id, b.ty, b.len, b.wram_offset);
    }
    for (k, pass) in prog.passes.iter().enumerate() {
        let w = &pass.wram;
        let ins: Vec<String> = w.inputs.iter().map(|o| format!("@{o}")).collect();
        let _ = writeln!(
            wram,
            "  pass {k}: acc @{} +{}, inputs {}, out @{} +{}",
            w.accumulators,
            w.accumulator_bytes,
            ins.join(" "),
            w.output,
            w.output_bytes
        );
    }
    holes.insert("wram", wram);

    let mut staging = String::new();
    for b in &prog.broadcasts {
        let _ = writeln!(staging, "  dma mram[{}] -> wram[{}], {} bytes", b.id, b.wram_offset, b.len * b.ty.width());
    }
    holes.insert("staging", staging);

    let mut passes = String::new();
    for (k, pass) in prog.passes.iter().enumerate() {
        render_pass(&mut passes, prog.pipeline, k, pass, prog.tasklets);
    }
    holes.insert("passes", passes);

    let mut relay = String::new();
    if let Some(r) = &prog.relay {
        let red = prog.pipeline.stages()[r.stage].reducer().expect("reduce stage");
        let _ = writeln!(relay, "\nrelay on dpu 0 {{");
        let _ = writeln!(relay, "  acc = mram[{} slot 0]", r.region.name);
        let _ = writeln!(relay, "  for s in 1..{}", r.slots);
        let _ = writeln!(relay, "    acc = {}    // in0 = acc, in1 = mram[{} slot s]", kernel::render(&red.combine), r.region.name);
        let _ = writeln!(relay, "  mram[{} slot 0] = acc", r.region.name);
        let _ = writeln!(relay, "}}");
    }
    holes.insert("relay", relay);

    let text = fill(SKELETON, &holes).expect("skeleton holes are all filled");
    RenderedSource { fingerprint: prog.fingerprint.clone(), text }
}
