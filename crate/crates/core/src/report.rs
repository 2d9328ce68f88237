//! Benchmark runs and their machine-readable reports.
//!
//! JSON reports follow the `pim-bench-report/1` schema documented in
//! `docs/report-schema.md`. Everything except the optional `wall_clock_ms`
//! is a pure function of the inputs, so repeated runs serialize identically.

use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codegen::{instantiate_template, render_source, RenderedSource};
use crate::machine::{CostCounters, PimMachineConfig};
use crate::planner::{plan, InputShape};
use crate::pipeline::{reference_execute, ExecError, Output};
use crate::runtime::{run, DpuCount, RunError, RunOptions};
use crate::workloads::{build_workload, SpecError, WorkloadSpec};

pub const REPORT_SCHEMA: &str = "pim-bench-report/1";

/// Relative tolerance used when a workload produces floats.
pub const FLOAT_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("reference execution failed: {0}")]
    Reference(#[from] ExecError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Parameters {
    pub n: u64,
    pub rows: Option<u64>,
    pub cols: Option<u64>,
    pub bins: Option<u64>,
    pub predicate: Option<String>,
    pub element_type: String,
    pub seed: u64,
    pub dpus: u32,
    pub parallel_transfer: bool,
    pub cpu_split: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputSummary {
    pub kind: &'static str,
    pub len: usize,
    /// SHA-256 of the little-endian encoding of every output value.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub schema: &'static str,
    pub workload: String,
    pub parameters: Parameters,
    pub verified: bool,
    pub output: OutputSummary,
    pub counters: CostCounters,
    pub plan_fingerprint: String,
    pub loc: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

fn summarize(out: &Output) -> OutputSummary {
    let kind = match out {
        Output::Stream(_) => "stream",
        Output::Scalar(_) => "scalar",
        Output::Array(_) => "array",
    };
    let mut h = Sha256::new();
    let mut buf = [0u8; 8];
    for v in out.values() {
        let w = v.ty().width() as usize;
        v.write_le(&mut buf[..w]);
        h.update(&buf[..w]);
    }
    OutputSummary { kind, len: out.values().len(), sha256: hex::encode(h.finalize()) }
}

/// Builds the workload, runs it on the simulator and checks it against the
/// reference executor. `timing` adds the (non-deterministic) wall-clock field.
pub fn run_bench(spec: &WorkloadSpec, machine: &PimMachineConfig, opts: &RunOptions, timing: bool) -> Result<BenchReport, BenchError> {
    let w = build_workload(spec)?;
    let started = Instant::now();
    let result = run(&w.pipeline, &w.inputs, &w.env, machine, opts)?;
    let elapsed = started.elapsed();
    let expected = w.finish(reference_execute(&w.pipeline, &w.inputs, &w.env)?);
    let got = w.finish(result.output);
    let verified = got.approx_eq(&expected, FLOAT_REL_TOL);
    let kind = spec.kind;
    let is = |k| kind == k;
    use crate::workloads::WorkloadKind as K;
    let parameters = Parameters {
        n: spec.n,
        rows: is(K::Gemv).then(|| spec.rows()),
        cols: is(K::Gemv).then_some(spec.cols),
        bins: is(K::Histogram).then_some(spec.bins),
        predicate: is(K::Select).then(|| spec.predicate.to_string()),
        element_type: spec.elem.to_string(),
        seed: spec.seed,
        dpus: match opts.dpus {
            DpuCount::All => machine.total_dpus(),
            DpuCount::Count(d) => d,
        },
        parallel_transfer: opts.parallel_transfer,
        cpu_split: opts.cpu_split,
    };
    Ok(BenchReport {
        schema: REPORT_SCHEMA,
        workload: kind.to_string(),
        parameters,
        verified,
        output: summarize(&got),
        counters: result.counters,
        plan_fingerprint: result.plan_fingerprint,
        loc: w.pipeline.statements(),
        wall_clock_ms: timing.then_some(elapsed.as_secs_f64() * 1e3),
    })
}

/// The plan and rendered DPU program a workload would run with.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSource {
    pub plan_json: String,
    /// `None` when nothing runs on the device (empty input).
    pub source: Option<RenderedSource>,
}

pub fn workload_source(spec: &WorkloadSpec, machine: &PimMachineConfig, opts: &RunOptions) -> Result<WorkloadSource, BenchError> {
    let w = build_workload(spec)?;
    let pl = plan(&w.pipeline, &InputShape::of(&w.inputs, &w.env), machine, &opts.plan_options()).map_err(RunError::from)?;
    let source = if pl.n == 0 || pl.passes.is_empty() {
        None
    } else {
        Some(render_source(&instantiate_template(&pl, &w.pipeline).map_err(RunError::from)?))
    };
    Ok(WorkloadSource { plan_json: pl.to_json(), source })
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub const CSV_HEADER: &'static str = "workload,n,seed,dpus,parallel_transfer,cpu_split,verified,output_len,output_sha256,\
host_to_mram_bytes,mram_to_host_bytes,dma_bytes,dma_ops,kernel_ops,launches,transfer_time,dma_time,compute_time,total_time,plan_fingerprint,loc";

    /// Header line plus one data line.
    pub fn to_csv(&self) -> String {
        let c = &self.counters;
        let p = &self.parameters;
        format!(
            "{}\n{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            Self::CSV_HEADER,
            self.workload,
            p.n,
            p.seed,
            p.dpus,
            p.parallel_transfer,
            p.cpu_split,
            self.verified,
            self.output.len,
            self.output.sha256,
            c.host_to_mram_bytes,
            c.mram_to_host_bytes,
            c.dma_bytes,
            c.dma_ops,
            c.kernel_ops,
            c.launches,
            c.transfer_time,
            c.dma_time,
            c.compute_time,
            c.total_time,
            self.plan_fingerprint,
            self.loc
        )
    }
}
