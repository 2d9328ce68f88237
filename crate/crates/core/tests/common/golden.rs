//! Fixed rendering inputs for the golden pseudo-source files.

use std::path::PathBuf;

use pimflow::machine::PimMachineConfig;
use pimflow::runtime::{DpuCount, RunOptions};
use pimflow::workload_source;
use pimflow::workloads::{WorkloadKind, WorkloadSpec};

pub fn path(kind: WorkloadKind) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{kind}.dpu.txt"))
}

pub fn render(kind: WorkloadKind) -> String {
    let opts = RunOptions { dpus: DpuCount::Count(64), ..Default::default() };
    let src = workload_source(&WorkloadSpec::new(kind, 1000, 1), &PimMachineConfig::default(), &opts).unwrap();
    src.source.expect("non-empty workloads run on the device").text
}

/// Compares every workload's rendering with its checked-in file.
pub fn check_all() -> Result<(), String> {
    for kind in WorkloadKind::ALL {
        let p = path(kind);
        let expected = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
        let text = render(kind);
        if text != expected {
            return Err(format!("{kind} differs from {}", p.display()));
        }
        if render(kind) != text {
            return Err(format!("{kind} renders differently on a second call"));
        }
    }
    Ok(())
}
