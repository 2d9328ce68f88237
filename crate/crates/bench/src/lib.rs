//! Fixtures shared by the criterion benchmarks.

use pimflow::{build_workload, run, DpuCount, PimMachineConfig, RunOptions, RunResult, Workload, WorkloadKind, WorkloadSpec};

/// Seed used by every benchmark input.
pub const SEED: u64 = 0x5eed;

pub fn workload(kind: WorkloadKind, n: u64) -> Workload {
    build_workload(&WorkloadSpec::new(kind, n, SEED)).expect("default workload specs are valid")
}

pub fn options(dpus: u32) -> RunOptions {
    RunOptions { dpus: DpuCount::Count(dpus), ..Default::default() }
}

/// One simulated run on the default machine.
pub fn simulate(w: &Workload, opts: &RunOptions) -> RunResult {
    run(&w.pipeline, &w.inputs, &w.env, &PimMachineConfig::default(), opts).expect("benchmark workloads run")
}
