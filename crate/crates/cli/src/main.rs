//! `bench`: runs one workload on the simulated machine and prints a report.
//!
//! Exit status is 0 when the simulated output matches the reference
//! executor, 1 when it does not and 2 on any error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use pimflow::workloads::{Predicate, WorkloadKind};
use pimflow::{run_bench, workload_source, DpuCount, PimMachineConfig, RunOptions, ScalarType, WorkloadSpec};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "bench", version, about = "Run a pimflow workload on the simulated PIM machine")]
struct Args {
    /// vecadd, select, reduce, unique, histogram or gemv.
    #[arg(long, value_parser = parse_workload)]
    workload: WorkloadKind,
    /// Stream length (matrix rows for gemv).
    #[arg(long)]
    size: u64,
    /// gemv matrix rows; overrides --size.
    #[arg(long)]
    rows: Option<u64>,
    /// gemv matrix columns.
    #[arg(long)]
    cols: Option<u64>,
    /// Histogram bin count.
    #[arg(long)]
    bins: Option<u64>,
    /// Histogram inputs are drawn from 0..RANGE.
    #[arg(long)]
    range: Option<u64>,
    /// Select predicate: even, odd or lt:<value>.
    #[arg(long, value_parser = parse_predicate)]
    predicate: Option<Predicate>,
    /// Element type: int32 or int64 (vecadd, select and reduce only).
    #[arg(long = "type", value_parser = parse_type)]
    elem: Option<ScalarType>,
    #[arg(long)]
    seed: u64,
    /// DPUs to use; all of the machine's by default.
    #[arg(long)]
    dpus: Option<u32>,
    #[arg(long)]
    no_parallel_transfer: bool,
    #[arg(long)]
    no_cpu_split: bool,
    /// Machine config file (TOML if the extension is .toml, JSON otherwise).
    #[arg(long)]
    machine: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the rendered DPU program and the execution plan into DIR.
    #[arg(long, value_name = "DIR")]
    dump_source: Option<PathBuf>,
    /// Add wall-clock time to the report; the output is then no longer reproducible.
    #[arg(long)]
    timing: bool,
}

fn parse_workload(s: &str) -> Result<WorkloadKind, String> {
    s.parse().map_err(|e: pimflow::workloads::SpecError| e.to_string())
}

fn parse_predicate(s: &str) -> Result<Predicate, String> {
    s.parse().map_err(|e: pimflow::workloads::SpecError| e.to_string())
}

fn parse_type(s: &str) -> Result<ScalarType, String> {
    match s {
        "int32" | "i32" => Ok(ScalarType::Int32),
        "int64" | "i64" => Ok(ScalarType::Int64),
        _ => Err(format!("unsupported element type `{s}` (int32, int64)")),
    }
}

fn spec(args: &Args) -> WorkloadSpec {
    let mut spec = WorkloadSpec::new(args.workload, args.size, args.seed);
    spec.rows = args.rows;
    spec.cols = args.cols.unwrap_or(spec.cols);
    spec.bins = args.bins.unwrap_or(spec.bins);
    spec.range = args.range.unwrap_or(spec.range);
    spec.predicate = args.predicate.unwrap_or(spec.predicate);
    spec.elem = args.elem.unwrap_or(spec.elem);
    spec
}

fn execute(args: &Args) -> Result<bool> {
    let machine = match &args.machine {
        Some(path) => PimMachineConfig::from_path(path).with_context(|| format!("loading {}", path.display()))?,
        None => PimMachineConfig::default(),
    };
    let opts = RunOptions {
        parallel_transfer: !args.no_parallel_transfer,
        cpu_split: !args.no_cpu_split,
        dpus: args.dpus.map_or(DpuCount::All, DpuCount::Count),
        seed: args.seed,
    };
    let spec = spec(args);
    if let Some(dir) = &args.dump_source {
        let dump = workload_source(&spec, &machine, &opts)?;
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let plan_path = dir.join(format!("{}.plan.json", spec.kind));
        std::fs::write(&plan_path, dump.plan_json + "\n").with_context(|| format!("writing {}", plan_path.display()))?;
        if let Some(src) = dump.source {
            let path = dir.join(format!("{}.dpu.txt", spec.kind));
            std::fs::write(&path, src.text).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    let report = run_bench(&spec, &machine, &opts, args.timing)?;
    match args.format {
        Format::Json => println!("{}", report.to_json()),
        Format::Csv => print!("{}", report.to_csv()),
    }
    Ok(report.verified)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("bench: simulated output does not match the reference");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("bench: {e:#}");
            ExitCode::from(2)
        }
    }
}
