//! Data-parallel pattern pipelines (map, filter, reduce, window, group)
//! compiled onto a simulated UPMEM-like processing-in-memory machine.
//!
//! The flow is: build a [`Pipeline`], [`plan`] it for a [`PimMachineConfig`],
//! instantiate the shared DPU program with [`instantiate_template`] and let
//! [`run`] partition, distribute, launch and gather. Every run can be checked
//! against the sequential [`reference_execute`].

pub mod codegen;
pub mod kernel;
pub mod machine;
pub mod pipeline;
pub mod planner;
pub mod report;
pub mod runtime;
pub mod workloads;

pub use codegen::{instantiate_template, render_source, CodegenError, DpuProgram, RenderedSource};
pub use kernel::{BufferId, EnvTypes, EvalError, Expr, KernelEnv, ScalarType, ScalarValue, TypeError};
pub use machine::{CostCounters, CostReport, Machine, MachineError, PimMachineConfig};
pub use pipeline::{reference_execute, AccType, AccValue, Output, Pipeline, PipelineError, Reducer, Stage};
pub use planner::{plan, ExecutionPlan, InputShape, PlanError, PlanOptions};
pub use report::{run_bench, workload_source, BenchError, BenchReport, WorkloadSource};
pub use runtime::{run, DpuCount, RunError, RunOptions, RunResult};
pub use workloads::{build_workload, loc_report, Predicate, Workload, WorkloadKind, WorkloadSpec};
