//! Software model of an UPMEM-like PIM system.
//!
//! The machine is a set of ranks of DPUs. Each DPU owns an MRAM bank, a WRAM
//! scratchpad and an IRAM bounding program size. The host moves bytes with
//! [`Machine::push`] / [`Machine::pull`] (or batches of them) and runs one
//! [`DpuProgram`] on a set of DPUs with [`Machine::launch`].
//!
//! # Cost model
//!
//! Linear, in arbitrary time units:
//!
//! * a transfer batch costs `bytes / host_link_bytes_per_unit_time`, where
//!   `bytes` is the batch total when ranks transfer serially, or the largest
//!   per-rank total when ranks transfer in parallel;
//! * each DPU spends `dma_bytes / wram_dma_bytes_per_unit_time` moving data
//!   between MRAM and WRAM and, per tile phase, `max tasklet ops /
//!   dpu_ops_per_unit_time` computing;
//! * a launch lasts as long as its slowest DPU, and
//!   `total = transfer + dma + compute` along that critical path.

mod exec;
mod mram;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codegen::DpuProgram;
use crate::kernel::EvalError;

pub use mram::Mram;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    pub host_link_bytes_per_unit_time: f64,
    pub wram_dma_bytes_per_unit_time: f64,
    pub dpu_ops_per_unit_time: f64,
    pub ranks_transfer_in_parallel: bool,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            host_link_bytes_per_unit_time: 1.0,
            wram_dma_bytes_per_unit_time: 1.0,
            dpu_ops_per_unit_time: 1.0,
            ranks_transfer_in_parallel: true,
        }
    }
}

/// Machine topology, capacities and cost parameters. Missing keys in a
/// config file take the defaults: 20 ranks of 128 DPUs, 64 MiB MRAM, 64 KiB
/// WRAM and 24 KiB IRAM per DPU, 16 tasklets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PimMachineConfig {
    pub ranks: u32,
    pub dpus_per_rank: u32,
    pub mram_bytes: u64,
    pub wram_bytes: u64,
    pub iram_bytes: u64,
    pub tasklets: u32,
    pub cost: CostParams,
}

impl Default for PimMachineConfig {
    fn default() -> Self {
        PimMachineConfig {
            ranks: 20,
            dpus_per_rank: 128,
            mram_bytes: 64 << 20,
            wram_bytes: 64 << 10,
            iram_bytes: 24 << 10,
            tasklets: 16,
            cost: CostParams::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing machine config: {0}")]
    Parse(String),
    #[error("invalid machine config: {0}")]
    Invalid(String),
}

impl PimMachineConfig {
    pub fn total_dpus(&self) -> u32 {
        self.ranks * self.dpus_per_rank
    }

    /// Total MRAM across the system.
    pub fn total_mram_bytes(&self) -> u64 {
        self.total_dpus() as u64 * self.mram_bytes
    }

    pub fn rank_of(&self, dpu: u32) -> u32 {
        dpu / self.dpus_per_rank
    }

    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validated()
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validated()
    }

    /// Loads a `.toml` file as TOML and anything else as JSON.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml_str(&text)
        } else {
            Self::from_json_str(&text)
        }
    }

    pub fn validated(self) -> Result<Self, ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.ranks == 0 || self.dpus_per_rank == 0 {
            return bad("ranks and dpus_per_rank must be positive");
        }
        if self.tasklets == 0 || self.tasklets > 24 {
            return bad("tasklets must be in 1..=24");
        }
        if !self.mram_bytes.is_multiple_of(8) || !self.wram_bytes.is_multiple_of(8) {
            return bad("mram_bytes and wram_bytes must be multiples of 8");
        }
        let c = &self.cost;
        for (name, v) in [
            ("host_link_bytes_per_unit_time", c.host_link_bytes_per_unit_time),
            ("wram_dma_bytes_per_unit_time", c.wram_dma_bytes_per_unit_time),
            ("dpu_ops_per_unit_time", c.dpu_ops_per_unit_time),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        Ok(self)
    }
}

/// Counters kept by each DPU.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DpuCounters {
    pub host_to_mram_bytes: u64,
    pub mram_to_host_bytes: u64,
    pub dma_bytes: u64,
    pub dma_ops: u64,
    pub kernel_ops: u64,
    pub dma_time: f64,
    pub compute_time: f64,
}

/// Aggregated counters of a machine.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CostCounters {
    pub host_to_mram_bytes: u64,
    pub mram_to_host_bytes: u64,
    pub dma_bytes: u64,
    pub dma_ops: u64,
    pub kernel_ops: u64,
    pub launches: u64,
    pub transfer_time: f64,
    /// DMA time along the critical path of every launch.
    pub dma_time: f64,
    /// Compute time along the critical path of every launch.
    pub compute_time: f64,
    pub total_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub total: CostCounters,
    /// Counters of every DPU that moved bytes, by DPU id.
    pub per_dpu: Vec<(u32, DpuCounters)>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MachineError {
    #[error("DPU {0} does not exist")]
    NoSuchDpu(u32),
    #[error("DPU {dpu}: MRAM access [{offset}, +{len}) exceeds {capacity} bytes")]
    MramBounds { dpu: u32, offset: u64, len: u64, capacity: u64 },
    #[error("DPU {dpu}: MRAM offset {offset} is not 8-byte aligned")]
    BadAlignment { dpu: u32, offset: u64 },
    #[error("DPU {dpu}: WRAM access [{offset}, +{len}) outside [{lo}, {hi})")]
    WramBounds { dpu: u32, offset: u64, len: u64, lo: u64, hi: u64 },
    #[error("program needs {estimate} bytes of IRAM, DPUs have {capacity}")]
    IramOverflow { estimate: u64, capacity: u64 },
    #[error("DPU {0} was launched before its inputs were pushed")]
    InputsNotResident(u32),
    #[error("DPU {dpu}: output of pass {pass} overflows region `{region}`")]
    RegionOverflow { dpu: u32, pass: usize, region: String },
    #[error("DPU {dpu}, pass {pass}, tile {tile}, element {element}: {source}")]
    Kernel { dpu: u32, pass: usize, tile: usize, element: u64, source: EvalError },
    #[error("DPU {dpu}: program has no arguments for it")]
    MissingArgs { dpu: u32 },
}

#[derive(Debug, Clone, Default)]
pub struct DpuState {
    pub mram: Mram,
    pub counters: DpuCounters,
    resident: bool,
}

/// Time spent by one DPU in one launch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct LaunchStats {
    pub dma_time: f64,
    pub compute_time: f64,
}

pub struct Machine {
    config: PimMachineConfig,
    dpus: Vec<DpuState>,
    transfer_time: f64,
    dma_time: f64,
    compute_time: f64,
    launches: u64,
}

/// A group of transfers issued together.
pub struct Batch<'m> {
    machine: &'m mut Machine,
    per_rank: BTreeMap<u32, u64>,
    total: u64,
}

impl Batch<'_> {
    pub fn push(&mut self, dpu: u32, offset: u64, bytes: &[u8]) -> Result<(), MachineError> {
        if bytes.is_empty() {
            return Ok(());
        }
        let state = self.machine.checked(dpu, offset, bytes.len() as u64)?;
        state.mram.write(offset, bytes).expect("bounds checked");
        state.counters.host_to_mram_bytes += bytes.len() as u64;
        state.resident = true;
        self.account(dpu, bytes.len() as u64);
        Ok(())
    }

    pub fn pull(&mut self, dpu: u32, offset: u64, len: u64) -> Result<Vec<u8>, MachineError> {
        if len == 0 {
            return Ok(Vec::new());
        }
        let state = self.machine.checked(dpu, offset, len)?;
        let bytes = state.mram.read(offset, len).expect("bounds checked");
        state.counters.mram_to_host_bytes += len;
        self.account(dpu, len);
        Ok(bytes)
    }

    fn account(&mut self, dpu: u32, len: u64) {
        *self.per_rank.entry(self.machine.config.rank_of(dpu)).or_default() += len;
        self.total += len;
    }

    /// Modeled duration of the batch.
    pub fn time(&self) -> f64 {
        let cost = &self.machine.config.cost;
        let bytes = if cost.ranks_transfer_in_parallel {
            self.per_rank.values().copied().max().unwrap_or(0)
        } else {
            self.total
        };
        bytes as f64 / cost.host_link_bytes_per_unit_time
    }
}

impl Machine {
    pub fn new(config: PimMachineConfig) -> Self {
        let dpus = (0..config.total_dpus())
            .map(|_| DpuState { mram: Mram::new(config.mram_bytes), ..Default::default() })
            .collect();
        Machine { config, dpus, transfer_time: 0.0, dma_time: 0.0, compute_time: 0.0, launches: 0 }
    }

    pub fn config(&self) -> &PimMachineConfig {
        &self.config
    }

    pub fn set_parallel_transfer(&mut self, on: bool) {
        self.config.cost.ranks_transfer_in_parallel = on;
    }

    pub fn dpu(&self, id: u32) -> Option<&DpuState> {
        self.dpus.get(id as usize)
    }

    fn checked(&mut self, dpu: u32, offset: u64, len: u64) -> Result<&mut DpuState, MachineError> {
        let state = self.dpus.get_mut(dpu as usize).ok_or(MachineError::NoSuchDpu(dpu))?;
        if !offset.is_multiple_of(crate::planner::TRANSFER_ALIGN) {
            return Err(MachineError::BadAlignment { dpu, offset });
        }
        let capacity = state.mram.capacity();
        if offset.checked_add(len).is_none_or(|end| end > capacity) {
            return Err(MachineError::MramBounds { dpu, offset, len, capacity });
        }
        Ok(state)
    }

    /// Runs `f` as one transfer batch and charges its modeled time.
    pub fn batch<T>(&mut self, f: impl FnOnce(&mut Batch<'_>) -> Result<T, MachineError>) -> Result<T, MachineError> {
        let mut batch = Batch { machine: self, per_rank: BTreeMap::new(), total: 0 };
        let out = f(&mut batch)?;
        let t = batch.time();
        self.transfer_time += t;
        Ok(out)
    }

    pub fn push(&mut self, dpu: u32, offset: u64, bytes: &[u8]) -> Result<(), MachineError> {
        self.batch(|b| b.push(dpu, offset, bytes))
    }

    pub fn pull(&mut self, dpu: u32, offset: u64, len: u64) -> Result<Vec<u8>, MachineError> {
        self.batch(|b| b.pull(dpu, offset, len))
    }

    fn check_program(&self, dpus: &[u32], program: &DpuProgram<'_>) -> Result<(), MachineError> {
        if program.iram_estimate > self.config.iram_bytes {
            return Err(MachineError::IramOverflow { estimate: program.iram_estimate, capacity: self.config.iram_bytes });
        }
        for &d in dpus {
            let state = self.dpus.get(d as usize).ok_or(MachineError::NoSuchDpu(d))?;
            if !state.resident {
                return Err(MachineError::InputsNotResident(d));
            }
        }
        Ok(())
    }

    /// Runs `program` on every DPU in `dpus`. DPUs execute concurrently; the
    /// result and counters do not depend on scheduling.
    pub fn launch(&mut self, dpus: &[u32], program: &DpuProgram<'_>) -> Result<(), MachineError> {
        self.check_program(dpus, program)?;
        let mut selected = vec![false; self.dpus.len()];
        for &d in dpus {
            selected[d as usize] = true;
        }
        let config = &self.config;
        let mut targets: Vec<(u32, &mut DpuState)> = self
            .dpus
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| selected[*i])
            .map(|(i, s)| (i as u32, s))
            .collect();
        let results: Vec<Result<LaunchStats, MachineError>> =
            targets.par_iter_mut().map(|(id, state)| exec::run_program(state, *id, program, config)).collect();
        self.finish_launch(results)
    }

    /// Folds the gathered partials in the relay region of DPU 0.
    pub fn launch_relay(&mut self, program: &DpuProgram<'_>) -> Result<(), MachineError> {
        self.check_program(&[0], program)?;
        let config = &self.config;
        let result = exec::run_relay(&mut self.dpus[0], 0, program, config);
        self.finish_launch(vec![result])
    }

    fn finish_launch(&mut self, results: Vec<Result<LaunchStats, MachineError>>) -> Result<(), MachineError> {
        let mut critical = LaunchStats::default();
        for r in results {
            let s = r?;
            if s.dma_time + s.compute_time > critical.dma_time + critical.compute_time {
                critical = s;
            }
        }
        self.dma_time += critical.dma_time;
        self.compute_time += critical.compute_time;
        self.launches += 1;
        Ok(())
    }

    pub fn cost_report(&self) -> CostReport {
        let mut total = CostCounters {
            transfer_time: self.transfer_time,
            dma_time: self.dma_time,
            compute_time: self.compute_time,
            launches: self.launches,
            ..Default::default()
        };
        let mut per_dpu = Vec::new();
        for (id, d) in self.dpus.iter().enumerate() {
            let c = &d.counters;
            if *c == DpuCounters::default() {
                continue;
            }
            total.host_to_mram_bytes += c.host_to_mram_bytes;
            total.mram_to_host_bytes += c.mram_to_host_bytes;
            total.dma_bytes += c.dma_bytes;
            total.dma_ops += c.dma_ops;
            total.kernel_ops += c.kernel_ops;
            per_dpu.push((id as u32, c.clone()));
        }
        total.total_time = total.transfer_time + total.dma_time + total.compute_time;
        CostReport { total, per_dpu }
    }
}
