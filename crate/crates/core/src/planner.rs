//! Lowering of a validated pipeline into an [`ExecutionPlan`].
//!
//! The plan fixes everything a run needs before any byte moves:
//!
//! * a block partition of the input over the participating DPUs, aligned to
//!   the group size of an on-device `group` and extended on the right by
//!   `W - 1` halo elements for an on-device `window`;
//! * the fused device passes and the host residue (see [`fuse_stages`]);
//! * per pass and per DPU, the WRAM tile schedule with MRAM/WRAM byte offsets;
//! * the uniform per-DPU MRAM layout and the transfer plan.
//!
//! Plans serialize to deterministic JSON ([`ExecutionPlan::to_json`]); the
//! schema is described in `docs/plan-format.md`.

use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kernel::{BufferId, KernelEnv, ScalarType, ScalarValue};
use crate::machine::PimMachineConfig;
use crate::pipeline::{AccType, DataType, Pipeline, Stage};

/// Transfer granularity: every MRAM offset and DMA start is a multiple of this.
pub const TRANSFER_ALIGN: u64 = 8;

pub(crate) fn round_up(x: u64, to: u64) -> u64 {
    x.div_ceil(to) * to
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

/// Smallest element count whose byte size is a multiple of the transfer alignment.
fn align_unit(width: u64) -> u64 {
    TRANSFER_ALIGN / gcd(TRANSFER_ALIGN, width)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("requested {requested} DPUs, machine has {available}")]
    BadDpuCount { requested: u32, available: u32 },
    #[error("per-DPU MRAM residency of {required} bytes exceeds the {capacity}-byte bank")]
    MramOverflow { required: u64, capacity: u64 },
    /// `needed` is the working set with the smallest legal tile, `available`
    /// the WRAM it has to fit in.
    #[error("pass {pass}: smallest tile needs a {needed}-byte working set, {available} bytes of WRAM available")]
    TileTooSmall { pass: usize, needed: u64, available: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PartitionConstraints {
    pub group: Option<u64>,
    pub window: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DpuPartition {
    pub dpu: u32,
    pub start: u64,
    pub count: u64,
    pub left_halo: u64,
    pub right_halo: u64,
}

impl DpuPartition {
    /// Elements resident on the DPU, halo included.
    pub fn resident(&self) -> u64 {
        self.left_halo + self.count + self.right_halo
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartitionSpec {
    pub n: u64,
    pub parts: Vec<DpuPartition>,
}

impl PartitionSpec {
    /// DPUs that received at least one element.
    pub fn working(&self) -> impl Iterator<Item = &DpuPartition> {
        self.parts.iter().filter(|p| p.count > 0)
    }
}

/// Contiguous block distribution; remainder units go to the lowest DPU ids.
///
/// With a group constraint the unit is a whole group, so no group straddles
/// two DPUs and only the last non-empty DPU can hold a partial group. When
/// every DPU works, that last DPU takes one of the remainder units in place
/// of the highest-id one, keeping counts within one group of each other.
pub fn partition(n: u64, ndpus: u32, constraints: PartitionConstraints) -> PartitionSpec {
    let ndpus = ndpus.max(1) as u64;
    let g = constraints.group.unwrap_or(1).max(1);
    let units = n.div_ceil(g);
    let (base, rem) = (units / ndpus, units % ndpus);
    let short_tail = !n.is_multiple_of(g) && base > 0 && rem > 0;
    let mut start = 0;
    let parts = (0..ndpus)
        .map(|i| {
            let extra = if short_tail { i + 1 < rem || i == ndpus - 1 } else { i < rem };
            let u = base + u64::from(extra);
            let count = (u * g).min(n - start);
            let right_halo = match constraints.window {
                Some(w) if count > 0 => (w.saturating_sub(1)).min(n - start - count),
                _ => 0,
            };
            let part = DpuPartition { dpu: i as u32, start, count, left_halo: 0, right_halo };
            start += count;
            part
        })
        .collect();
    PartitionSpec { n, parts }
}

/// How a pass leaves its results in MRAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PassOutput {
    /// One output per position, at a statically known count.
    Dense,
    /// Filter survivors packed after an 8-byte element-count word.
    Compacted,
    /// One accumulator per DPU.
    Partial(AccType),
}

/// Elementwise stages fused into one loop, optionally ended by one blocking
/// stage. Stages are referenced by their index in the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FusedPass {
    pub elementwise: Vec<usize>,
    pub blocking: Option<usize>,
    pub input_types: Vec<ScalarType>,
    pub output_type: ScalarType,
    pub output: PassOutput,
}

impl FusedPass {
    pub fn stages(&self) -> impl Iterator<Item = usize> + '_ {
        self.elementwise.iter().copied().chain(self.blocking)
    }
}

/// Host-side work after gathering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HostStep {
    /// Fold the per-DPU partial accumulators, in DPU id order.
    CombinePartials,
    /// Run pipeline stage `i` with the reference executor.
    Stage(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Fusion {
    pub passes: Vec<FusedPass>,
    pub residue: Vec<HostStep>,
}

/// Splits the stage list into device passes and host residue.
///
/// Map/filter runs fuse; a reduce, window or group ends a pass. A DPU only
/// sees its own block of the stream, so the device prefix stops at the
/// first stage it cannot compute locally:
///
/// * a window is on-device only before any filter or group, and only once;
/// * a group is on-device only before any filter, and only once;
/// * a reduce is always on-device and everything after it is host residue.
///
/// A filtered stream is gathered without its original indices. If the first
/// residue stage is a window/group whose reducer reads `gidx`, the trailing
/// filter segment moves to the host as well so the indices stay exact.
///
/// With `cpu_split` the combine of per-DPU partials is a host residue step;
/// without it the runtime relays partials through DPU 0 before the residue.
pub fn fuse_stages(p: &Pipeline, cpu_split: bool) -> Fusion {
    let stages = p.stages();
    let mut passes = Vec::new();
    let mut ops: Vec<usize> = Vec::new();
    let mut first_filter_in_ops: Option<usize> = None;
    let (mut dense, mut window_done, mut group_done) = (true, false, false);
    let mut residue_start = stages.len();
    let mut reduced = false;

    let close = |ops: &mut Vec<usize>, blocking: Option<usize>, passes: &mut Vec<FusedPass>| {
        let first = ops.first().copied().or(blocking).expect("non-empty pass");
        let last = blocking.or_else(|| ops.last().copied()).expect("non-empty pass");
        let has_filter = ops.iter().any(|&i| matches!(stages[i], Stage::Filter(_)));
        let (output_type, output) = match p.stage_type(last) {
            DataType::Stream(t) => (t, if has_filter { PassOutput::Compacted } else { PassOutput::Dense }),
            DataType::Scalar(t) => (t, PassOutput::Partial(AccType::Scalar(t))),
            DataType::Array { elem, len } => (elem, PassOutput::Partial(AccType::Array { elem, len })),
        };
        passes.push(FusedPass {
            elementwise: std::mem::take(ops),
            blocking,
            input_types: p.stage_inputs(first),
            output_type,
            output,
        });
    };

    for (i, stage) in stages.iter().enumerate() {
        match stage {
            Stage::Map(_) => ops.push(i),
            Stage::Filter(_) => {
                first_filter_in_ops.get_or_insert(ops.len());
                ops.push(i);
                dense = false;
            }
            Stage::Window { .. } if dense && !window_done && !group_done => {
                close(&mut ops, Some(i), &mut passes);
                window_done = true;
            }
            Stage::Group { .. } if dense && !group_done => {
                close(&mut ops, Some(i), &mut passes);
                group_done = true;
            }
            Stage::Reduce(_) => {
                close(&mut ops, Some(i), &mut passes);
                residue_start = i + 1;
                reduced = true;
                break;
            }
            Stage::Window { .. } | Stage::Group { .. } => {
                residue_start = i;
                break;
            }
        }
    }

    if !reduced && residue_start < stages.len() && !dense {
        let reads_index = stages[residue_start].reducer().is_some_and(|r| r.uses_global_index());
        if let (true, Some(cut)) = (reads_index, first_filter_in_ops) {
            residue_start = ops[cut];
            ops.truncate(cut);
        }
    }
    if !ops.is_empty() {
        close(&mut ops, None, &mut passes);
    }

    let mut residue = Vec::new();
    if reduced && cpu_split {
        residue.push(HostStep::CombinePartials);
    }
    residue.extend((residue_start..stages.len()).map(HostStep::Stage));
    Fusion { passes, residue }
}

/// Static per-DPU, per-pass element counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PassCounts {
    /// Elements resident in the pass input region.
    pub inputs: u64,
    /// Global index (stream position) of the first local input element.
    pub base_index: u64,
    /// Tiled positions: outputs for a window pass, inputs otherwise.
    pub positions: u64,
    /// Output elements; an upper bound for compacted outputs.
    pub outputs: u64,
}

/// Working set of one pass, per tiled position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TileRequest {
    /// Input bytes per position, summed over streams.
    pub in_bytes: u64,
    /// Output bytes per output element (0 for a reduce).
    pub out_bytes: u64,
    /// Extra trailing input positions every tile loads (`W - 1` for windows).
    pub overlap: u64,
    /// Positions per output element (`G` for groups, 1 otherwise).
    pub group: u64,
    /// Tile lengths are multiples of this.
    pub align: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Tile {
    /// First local input element.
    pub first: u64,
    /// Byte offset of the tile within the first input region.
    pub mram_offset: u64,
    /// WRAM byte offset of the first input buffer.
    pub wram_offset: u64,
    /// Input elements loaded, overlap included.
    pub elements: u64,
    /// Positions processed by this tile.
    pub positions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TilePlan {
    pub tile_positions: u64,
    pub budget_bytes: u64,
    pub per_dpu: Vec<Vec<Tile>>,
}

/// Largest aligned tile whose working set fits `budget`.
pub fn tile_positions(req: &TileRequest, budget: i64, pass: usize) -> Result<u64, PlanError> {
    let group = req.group.max(1);
    let align = lcm(req.align.max(1), group);
    let needed = req.in_bytes * (align + req.overlap) + req.out_bytes * (align / group);
    let too_small = PlanError::TileTooSmall { pass, needed, available: budget.max(0) as u64 };
    if budget <= 0 {
        return Err(too_small);
    }
    let budget = budget as u64;
    let fixed = req.in_bytes * req.overlap;
    if budget < fixed {
        return Err(too_small);
    }
    let positions = if group > 1 {
        (budget - fixed) / (group * req.in_bytes + req.out_bytes) * group
    } else {
        (budget - fixed) / (req.in_bytes + req.out_bytes)
    };
    let t = positions / align * align;
    if t == 0 {
        return Err(too_small);
    }
    Ok(t)
}

/// Tiles covering `positions` positions of one DPU, each loading up to
/// `overlap` extra inputs from the `inputs` resident elements.
pub fn tiles_for(positions: u64, inputs: u64, tile: u64, overlap: u64, width: u64, wram_offset: u64) -> Vec<Tile> {
    (0..positions.div_ceil(tile))
        .map(|k| {
            let first = k * tile;
            let len = tile.min(positions - first);
            Tile {
                first,
                mram_offset: first * width,
                wram_offset,
                elements: (len + overlap).min(inputs - first),
                positions: len,
            }
        })
        .collect()
}

/// Tile schedule for a first pass over `p`.
pub fn compute_tiles(p: &PartitionSpec, req: &TileRequest, budget: i64, first_width: u64) -> Result<TilePlan, PlanError> {
    let tile = tile_positions(req, budget, 0)?;
    let valid_end = (p.n + 1).saturating_sub(req.overlap + 1);
    let per_dpu = p
        .parts
        .iter()
        .map(|d| {
            let positions = if req.overlap > 0 { valid_end.saturating_sub(d.start).min(d.count) } else { d.count };
            tiles_for(positions, d.resident(), tile, req.overlap, first_width, 0)
        })
        .collect();
    Ok(TilePlan { tile_positions: tile, budget_bytes: budget.max(0) as u64, per_dpu })
}

/// A byte range in every participating DPU's MRAM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Region {
    pub name: String,
    pub offset: u64,
    pub bytes: u64,
    pub ty: ScalarType,
    /// Holds a count word followed by a variable number of elements.
    pub variable: bool,
}

impl Region {
    /// Offset of the first element.
    pub fn data_offset(&self) -> u64 {
        self.offset + if self.variable { TRANSFER_ALIGN } else { 0 }
    }

    /// Element capacity.
    pub fn capacity(&self) -> u64 {
        (self.bytes - (self.data_offset() - self.offset)) / self.ty.width()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MramLayout {
    pub inputs: Vec<Region>,
    pub broadcasts: Vec<(BufferId, Region)>,
    pub pass_outputs: Vec<Region>,
    /// Partials gathered onto DPU 0 when the combine is not done on the host.
    pub relay: Option<Region>,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WramLayout {
    pub accumulators: u64,
    pub accumulator_bytes: u64,
    pub inputs: Vec<u64>,
    pub output: u64,
    pub output_bytes: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransferPlan {
    pub parallel_transfer: bool,
    pub cpu_split: bool,
    /// Bytes pushed per working DPU for each input stream (uniform, padded).
    pub input_push_bytes: Vec<u64>,
    /// Bytes of broadcast data pushed per working DPU.
    pub broadcast_push_bytes: u64,
    pub working_dpus: u32,
}

/// Where per-DPU partial accumulators get combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CombineSite {
    Host,
    /// Gathered to the host, pushed to DPU 0 and combined there.
    DpuRelay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PlanOptions {
    pub parallel_transfer: bool,
    pub cpu_split: bool,
    /// DPUs to partition over; `None` for all.
    pub dpus: Option<u32>,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions { parallel_transfer: true, cpu_split: true, dpus: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecutionPlan {
    pub n: u64,
    pub shape: InputShape,
    pub dpus: u32,
    pub tasklets: u32,
    pub iram_bytes: u64,
    pub partition: PartitionSpec,
    pub passes: Vec<FusedPass>,
    pub residue: Vec<HostStep>,
    pub combine: Option<CombineSite>,
    /// `counts[dpu][pass]`.
    pub counts: Vec<Vec<PassCounts>>,
    pub tiles: Vec<TilePlan>,
    pub wram: Vec<WramLayout>,
    /// WRAM offsets of the staged broadcast buffers.
    pub wram_broadcasts: Vec<(BufferId, u64)>,
    pub layout: MramLayout,
    pub transfer: TransferPlan,
}

impl ExecutionPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plans serialize")
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("plans serialize");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn working(&self) -> impl Iterator<Item = &DpuPartition> {
        self.partition.working()
    }
}

fn window_size(p: &Pipeline, pass: &FusedPass) -> Option<u64> {
    match pass.blocking.map(|i| &p.stages()[i]) {
        Some(Stage::Window { size, .. }) => Some(*size as u64),
        _ => None,
    }
}

fn group_size(p: &Pipeline, pass: &FusedPass) -> Option<u64> {
    match pass.blocking.map(|i| &p.stages()[i]) {
        Some(Stage::Group { size, .. }) => Some(*size as u64),
        _ => None,
    }
}

/// Sizes a plan depends on: the stream length and every broadcast buffer's length.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct InputShape {
    pub n: u64,
    pub broadcasts: BTreeMap<BufferId, u64>,
}

impl InputShape {
    pub fn elements(n: u64) -> Self {
        InputShape { n, broadcasts: BTreeMap::new() }
    }

    pub fn with_broadcast(mut self, id: BufferId, len: u64) -> Self {
        self.broadcasts.insert(id, len);
        self
    }

    pub fn of(inputs: &[Vec<ScalarValue>], env: &KernelEnv) -> Self {
        InputShape {
            n: inputs.first().map_or(0, Vec::len) as u64,
            broadcasts: env.iter().map(|(id, b)| (id, b.data.len() as u64)).collect(),
        }
    }
}

/// Plans `p` for inputs of the given shape on machine `m`.
pub fn plan(p: &Pipeline, shape: &InputShape, m: &PimMachineConfig, opts: &PlanOptions) -> Result<ExecutionPlan, PlanError> {
    let n = shape.n;
    let available = m.total_dpus();
    let dpus = opts.dpus.unwrap_or(available);
    if dpus == 0 || dpus > available {
        return Err(PlanError::BadDpuCount { requested: dpus, available });
    }
    let fusion = fuse_stages(p, opts.cpu_split);
    let constraints = PartitionConstraints {
        group: fusion.passes.iter().find_map(|f| group_size(p, f)),
        window: fusion.passes.iter().find_map(|f| window_size(p, f)),
    };
    let partition = partition(n, dpus, constraints);

    let counts: Vec<Vec<PassCounts>> = partition
        .parts
        .iter()
        .map(|d| {
            let mut out = Vec::with_capacity(fusion.passes.len());
            let (mut inputs, mut base) = (d.resident(), d.start);
            for pass in &fusion.passes {
                let (positions, outputs, next_base) = if let Some(w) = window_size(p, pass) {
                    let valid_end = (n + 1).saturating_sub(w);
                    let pos = valid_end.saturating_sub(base).min(d.count);
                    (pos, pos, base)
                } else if let Some(g) = group_size(p, pass) {
                    (inputs, inputs.div_ceil(g), base / g)
                } else if let PassOutput::Partial(_) = pass.output {
                    (inputs, u64::from(inputs > 0), 0)
                } else {
                    (inputs, inputs, base)
                };
                out.push(PassCounts { inputs, base_index: base, positions, outputs });
                inputs = outputs;
                base = next_base;
            }
            out
        })
        .collect();

    // WRAM: staged broadcast buffers first, shared by every pass.
    let mut wram_broadcasts = Vec::new();
    let mut staged = 0;
    for (id, ty) in p.broadcasts() {
        wram_broadcasts.push((*id, staged));
        staged += round_up(shape.broadcasts.get(id).copied().unwrap_or(0) * ty.width(), TRANSFER_ALIGN);
    }

    let mut tiles = Vec::with_capacity(fusion.passes.len());
    let mut wram = Vec::with_capacity(fusion.passes.len());
    for (k, pass) in fusion.passes.iter().enumerate() {
        let overlap = window_size(p, pass).map_or(0, |w| w - 1);
        let group = group_size(p, pass).unwrap_or(1);
        let in_bytes: u64 = pass.input_types.iter().map(|t| t.width()).sum();
        let out_w = pass.output_type.width();
        let (out_bytes, acc_bytes) = match pass.output {
            PassOutput::Partial(acc) => (0, round_up(acc.bytes(), TRANSFER_ALIGN)),
            _ if pass.blocking.is_some() => (out_w, TRANSFER_ALIGN),
            _ => (out_w, 0),
        };
        let mut align = pass.input_types.iter().fold(1, |a, t| lcm(a, align_unit(t.width())));
        align = lcm(align, group * align_unit(out_w));
        let req = TileRequest { in_bytes, out_bytes, overlap, group, align };
        let accumulators = staged;
        let reserved_acc = acc_bytes * m.tasklets as u64;
        let carry = if pass.output == PassOutput::Compacted { TRANSFER_ALIGN } else { 0 };
        let slack = TRANSFER_ALIGN * (pass.input_types.len() as u64 + 1);
        let reserved = accumulators + reserved_acc + carry + slack;
        let budget = m.wram_bytes as i64 - reserved as i64;
        let tile = tile_positions(&req, budget, k).map_err(|e| match e {
            PlanError::TileTooSmall { needed, .. } => PlanError::TileTooSmall { pass: k, needed: needed + reserved, available: m.wram_bytes },
            other => other,
        })?;

        let mut cursor = accumulators + reserved_acc;
        let mut inputs = Vec::new();
        for t in &pass.input_types {
            inputs.push(cursor);
            cursor += round_up((tile + overlap) * t.width(), TRANSFER_ALIGN);
        }
        let output = cursor;
        let output_bytes = round_up((tile / group) * out_bytes, TRANSFER_ALIGN) + carry;
        cursor += output_bytes;
        wram.push(WramLayout {
            accumulators,
            accumulator_bytes: reserved_acc,
            inputs: inputs.clone(),
            output,
            output_bytes,
            end: cursor,
        });

        let w0 = pass.input_types[0].width();
        let per_dpu = counts
            .iter()
            .map(|c| tiles_for(c[k].positions, c[k].inputs, tile, overlap, w0, inputs[0]))
            .collect();
        tiles.push(TilePlan { tile_positions: tile, budget_bytes: budget as u64, per_dpu });
    }

    // MRAM: one uniform layout sized for the largest DPU.
    let mut cursor = 0;
    let mut region = |name: String, bytes: u64, ty: ScalarType, variable: bool| {
        let r = Region { name, offset: cursor, bytes, ty, variable };
        cursor += bytes;
        r
    };
    let max_resident = partition.parts.iter().map(DpuPartition::resident).max().unwrap_or(0);
    let input_push_bytes: Vec<u64> =
        p.inputs().iter().map(|t| round_up(max_resident * t.width(), TRANSFER_ALIGN)).collect();
    let input_regions: Vec<Region> = p
        .inputs()
        .iter()
        .zip(&input_push_bytes)
        .enumerate()
        .map(|(s, (t, bytes))| region(format!("in{s}"), *bytes, *t, false))
        .collect();
    let mut broadcast_push_bytes = 0;
    let broadcast_regions: Vec<(BufferId, Region)> = p
        .broadcasts()
        .iter()
        .map(|(id, ty)| {
            let bytes = round_up(shape.broadcasts.get(id).copied().unwrap_or(0) * ty.width(), TRANSFER_ALIGN);
            broadcast_push_bytes += bytes;
            (*id, region(id.to_string(), bytes, *ty, false))
        })
        .collect();
    let pass_outputs: Vec<Region> = fusion
        .passes
        .iter()
        .enumerate()
        .map(|(k, pass)| {
            let max_out = counts.iter().map(|c| c[k].outputs).max().unwrap_or(0);
            let w = pass.output_type.width();
            let name = format!("pass{k}.out");
            match pass.output {
                PassOutput::Dense => region(name, round_up(max_out * w, TRANSFER_ALIGN), pass.output_type, false),
                PassOutput::Compacted => {
                    region(name, TRANSFER_ALIGN + round_up(max_out * w, TRANSFER_ALIGN), pass.output_type, true)
                }
                PassOutput::Partial(acc) => region(name, round_up(acc.bytes(), TRANSFER_ALIGN), pass.output_type, false),
            }
        })
        .collect();
    let working = partition.working().count() as u64;
    let final_partial = fusion.passes.last().and_then(|f| match f.output {
        PassOutput::Partial(acc) => Some(acc),
        _ => None,
    });
    let combine = final_partial.map(|_| if opts.cpu_split { CombineSite::Host } else { CombineSite::DpuRelay });
    let relay = match (final_partial, opts.cpu_split) {
        (Some(acc), false) => {
            Some(region("relay".into(), working * round_up(acc.bytes(), TRANSFER_ALIGN), acc.elem(), false))
        }
        _ => None,
    };
    let total = cursor;
    if total > m.mram_bytes {
        return Err(PlanError::MramOverflow { required: total, capacity: m.mram_bytes });
    }
    let layout = MramLayout { inputs: input_regions, broadcasts: broadcast_regions, pass_outputs, relay, total };

    Ok(ExecutionPlan {
        n,
        shape: shape.clone(),
        dpus,
        tasklets: m.tasklets,
        iram_bytes: m.iram_bytes,
        partition,
        passes: fusion.passes,
        residue: fusion.residue,
        combine,
        counts,
        tiles,
        wram,
        wram_broadcasts,
        layout,
        transfer: TransferPlan {
            parallel_transfer: opts.parallel_transfer,
            cpu_split: opts.cpu_split,
            input_push_bytes,
            broadcast_push_bytes,
            working_dpus: working as u32,
        },
    })
}
