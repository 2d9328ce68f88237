//! Partition, distribute, launch, gather, then finish on the host.

use thiserror::Error;

use crate::codegen::{instantiate_template, CodegenError, DpuProgram};
use crate::kernel::{KernelEnv, ScalarType, ScalarValue};
use crate::machine::{CostCounters, CostReport, Machine, MachineError, PimMachineConfig};
use crate::pipeline::{self, AccValue, Data, ExecError, Output, Pipeline};
use crate::planner::{self, round_up, ExecutionPlan, HostStep, InputShape, PassOutput, PlanError, PlanOptions, Region, TRANSFER_ALIGN};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum DpuCount {
    #[default]
    All,
    Count(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Ranks transfer concurrently within a batch.
    pub parallel_transfer: bool,
    /// Reduce partials are combined by the host rather than relayed through DPU 0.
    pub cpu_split: bool,
    pub dpus: DpuCount,
    /// Seed of randomized harnesses driving the run; execution itself is deterministic.
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { parallel_transfer: true, cpu_split: true, dpus: DpuCount::All, seed: 0 }
    }
}

impl RunOptions {
    pub fn plan_options(&self) -> PlanOptions {
        PlanOptions {
            parallel_transfer: self.parallel_transfer,
            cpu_split: self.cpu_split,
            dpus: match self.dpus {
                DpuCount::All => None,
                DpuCount::Count(d) => Some(d),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub output: Output,
    pub counters: CostCounters,
    pub report: CostReport,
    pub plan_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Codegen(#[from] CodegenError),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error("DPU {dpu} reports {count} elements in a region that holds {capacity}")]
    CountExceedsRegion { dpu: u32, count: u64, capacity: u64 },
}

fn encode(values: &[ScalarValue], ty: ScalarType, padded: u64) -> Vec<u8> {
    let w = ty.width() as usize;
    let mut out = vec![0u8; padded as usize];
    for (v, slot) in values.iter().zip(out.chunks_exact_mut(w)) {
        v.write_le(slot);
    }
    out
}

fn decode(bytes: &[u8], ty: ScalarType) -> impl Iterator<Item = ScalarValue> + '_ {
    bytes.chunks_exact(ty.width() as usize).map(move |b| ScalarValue::read_le(ty, b))
}

/// Gathers compacted outputs: one batch for the count words, one for the
/// survivors. Only `count` elements are pulled from each DPU.
pub fn gather_filtered(machine: &mut Machine, region: &Region, dpus: &[u32]) -> Result<Vec<ScalarValue>, RunError> {
    let words = machine.batch(|b| dpus.iter().map(|&d| b.pull(d, region.offset, TRANSFER_ALIGN)).collect::<Result<Vec<_>, _>>())?;
    let mut counts = Vec::with_capacity(dpus.len());
    for (&dpu, word) in dpus.iter().zip(&words) {
        let count = u64::from_le_bytes(word[..8].try_into().expect("8-byte count word"));
        if count > region.capacity() {
            return Err(RunError::CountExceedsRegion { dpu, count, capacity: region.capacity() });
        }
        counts.push(count);
    }
    let w = region.ty.width();
    let data = machine.batch(|b| {
        dpus.iter().zip(&counts).map(|(&d, &c)| b.pull(d, region.data_offset(), c * w)).collect::<Result<Vec<_>, _>>()
    })?;
    Ok(data.iter().flat_map(|bytes| decode(bytes, region.ty)).collect())
}

/// Runs `p` on a fresh machine built from `m`.
pub fn run(
    p: &Pipeline,
    inputs: &[Vec<ScalarValue>],
    env: &KernelEnv,
    m: &PimMachineConfig,
    opts: &RunOptions,
) -> Result<RunResult, RunError> {
    pipeline::validate_inputs(p, inputs, env)?;
    let plan = planner::plan(p, &InputShape::of(inputs, env), m, &opts.plan_options())?;
    let fingerprint = plan.fingerprint();
    let mut machine = Machine::new(m.clone());
    machine.set_parallel_transfer(opts.parallel_transfer);

    if plan.n == 0 || plan.passes.is_empty() {
        let output = pipeline::reference_execute(p, inputs, env)?;
        let report = machine.cost_report();
        return Ok(RunResult { output, counters: report.total.clone(), report, plan_fingerprint: fingerprint });
    }

    let program = instantiate_template(&plan, p)?;
    let working: Vec<u32> = plan.working().map(|d| d.dpu).collect();
    distribute(&mut machine, &plan, inputs, env, &working)?;
    machine.launch(&working, &program)?;
    let gathered = gather(&mut machine, &plan, &program, &working)?;
    let output = finish(p, &plan, gathered, env)?;
    let report = machine.cost_report();
    Ok(RunResult { output, counters: report.total.clone(), report, plan_fingerprint: fingerprint })
}

/// One batch: every stream block (halo included) and every broadcast buffer,
/// each padded to the uniform per-DPU size.
fn distribute(
    machine: &mut Machine,
    plan: &ExecutionPlan,
    inputs: &[Vec<ScalarValue>],
    env: &KernelEnv,
    working: &[u32],
) -> Result<(), RunError> {
    let broadcasts: Vec<(u64, Vec<u8>)> = plan
        .layout
        .broadcasts
        .iter()
        .map(|(id, region)| {
            let data = env.get(*id).map(|b| b.data.to_vec()).unwrap_or_default();
            (region.offset, encode(&data, region.ty, region.bytes))
        })
        .collect();
    machine.batch(|b| {
        for &d in working {
            let part = &plan.partition.parts[d as usize];
            let range = part.start as usize..(part.start + part.resident()) as usize;
            for (s, region) in plan.layout.inputs.iter().enumerate() {
                let bytes = encode(&inputs[s][range.clone()], region.ty, plan.transfer.input_push_bytes[s]);
                b.push(d, region.offset, &bytes)?;
            }
            for (offset, bytes) in &broadcasts {
                b.push(d, *offset, bytes)?;
            }
        }
        Ok(())
    })?;
    Ok(())
}

enum Gathered {
    Stream(Vec<ScalarValue>),
    Partials(Vec<AccValue>),
    Combined(AccValue),
}

fn gather(
    machine: &mut Machine,
    plan: &ExecutionPlan,
    program: &DpuProgram<'_>,
    working: &[u32],
) -> Result<Gathered, RunError> {
    let last = plan.passes.len() - 1;
    let region = &plan.layout.pass_outputs[last];
    let w = region.ty.width();
    match plan.passes[last].output {
        PassOutput::Dense => {
            let chunks = machine.batch(|b| {
                working
                    .iter()
                    .map(|&d| b.pull(d, region.offset, plan.counts[d as usize][last].outputs * w))
                    .collect::<Result<Vec<_>, _>>()
            })?;
            Ok(Gathered::Stream(chunks.iter().flat_map(|c| decode(c, region.ty)).collect()))
        }
        PassOutput::Compacted => Ok(Gathered::Stream(gather_filtered(machine, region, working)?)),
        PassOutput::Partial(acc) => {
            let raw = machine.batch(|b| working.iter().map(|&d| b.pull(d, region.offset, acc.bytes())).collect::<Result<Vec<_>, _>>())?;
            let relay = match &plan.layout.relay {
                None => return Ok(Gathered::Partials(raw.iter().map(|r| AccValue::decode(acc, r)).collect())),
                Some(relay) => relay,
            };
            let stride = round_up(acc.bytes(), TRANSFER_ALIGN);
            let mut packed = vec![0u8; relay.bytes as usize];
            for (k, r) in raw.iter().enumerate() {
                let at = k * stride as usize;
                packed[at..at + r.len()].copy_from_slice(r);
            }
            machine.push(0, relay.offset, &packed)?;
            machine.launch_relay(program)?;
            let bytes = machine.pull(0, relay.offset, acc.bytes())?;
            Ok(Gathered::Combined(AccValue::decode(acc, &bytes)))
        }
    }
}

/// Host residue: partial combine in DPU id order, then the remaining stages
/// through the reference executor.
fn finish(p: &Pipeline, plan: &ExecutionPlan, gathered: Gathered, env: &KernelEnv) -> Result<Output, RunError> {
    let mut data = match gathered {
        Gathered::Stream(values) => Data::dense(vec![values]),
        Gathered::Combined(acc) => Data::Acc(acc),
        Gathered::Partials(partials) => {
            let stage = plan.passes.last().and_then(|f| f.blocking).expect("partials come from a reduce");
            let reducer = p.stages()[stage].reducer().expect("reduce stage");
            let mut it = partials.into_iter();
            let first = it.next().unwrap_or_else(|| reducer.identity_value());
            let acc = it.try_fold(first, |a, b| reducer.combine(&a, &b, env)).map_err(|source| ExecError::Kernel { stage, source })?;
            Data::Acc(acc)
        }
    };
    let stages: Vec<usize> = plan
        .residue
        .iter()
        .filter_map(|s| match s {
            HostStep::Stage(i) => Some(*i),
            HostStep::CombinePartials => None,
        })
        .collect();
    if let (Some(&a), Some(&b)) = (stages.first(), stages.last()) {
        data = pipeline::execute_stages(p, a..b + 1, data, env)?;
    }
    Ok(data.into_output())
}
