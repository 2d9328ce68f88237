//! Execution of a [`DpuProgram`] on one simulated DPU.

use super::{DpuState, LaunchStats, MachineError, PimMachineConfig};
use crate::codegen::{DpuProgram, PassKind, PassProgram};
use crate::kernel::{self, EvalError, KernelEnv, ScalarValue};
use crate::pipeline::{AccValue, Reducer, Stage};
use crate::planner::{round_up, tiles_for, PassCounts, PassOutput, TRANSFER_ALIGN};

type Row = ([ScalarValue; 2], usize);

/// Contiguous split of `len` items over `tasklets`; earlier tasklets take the remainder.
pub(crate) fn tasklet_chunk(len: u64, tasklets: u64, t: u64) -> std::ops::Range<u64> {
    let (base, rem) = (len / tasklets, len % tasklets);
    let start = t * base + t.min(rem);
    start..start + base + u64::from(t < rem)
}

struct Dpu<'a> {
    id: u32,
    state: &'a mut DpuState,
    cfg: &'a PimMachineConfig,
    wram: Vec<u8>,
    dma_bytes: u64,
    dma_ops: u64,
    ops: u64,
    compute_time: f64,
}

impl<'a> Dpu<'a> {
    fn new(id: u32, state: &'a mut DpuState, cfg: &'a PimMachineConfig) -> Self {
        Dpu {
            id,
            state,
            cfg,
            wram: vec![0; cfg.wram_bytes as usize],
            dma_bytes: 0,
            dma_ops: 0,
            ops: 0,
            compute_time: 0.0,
        }
    }

    fn guard(&self, offset: u64, len: u64, lo: u64, hi: u64) -> Result<std::ops::Range<usize>, MachineError> {
        let hi = hi.min(self.wram.len() as u64);
        match offset.checked_add(len) {
            Some(end) if offset >= lo && end <= hi => Ok(offset as usize..end as usize),
            _ => Err(MachineError::WramBounds { dpu: self.id, offset, len, lo, hi }),
        }
    }

    fn mram_check(&self, offset: u64, len: u64) -> Result<(), MachineError> {
        if !offset.is_multiple_of(TRANSFER_ALIGN) {
            return Err(MachineError::BadAlignment { dpu: self.id, offset });
        }
        let capacity = self.state.mram.capacity();
        if offset.checked_add(len).is_none_or(|end| end > capacity) {
            return Err(MachineError::MramBounds { dpu: self.id, offset, len, capacity });
        }
        Ok(())
    }

    fn mram_to_wram(&mut self, mram: u64, wram: u64, len: u64) -> Result<(), MachineError> {
        if len == 0 {
            return Ok(());
        }
        self.mram_check(mram, len)?;
        let range = self.guard(wram, len, 0, u64::MAX)?;
        self.state.mram.read_into(mram, &mut self.wram[range]).expect("bounds checked");
        self.dma_bytes += len;
        self.dma_ops += 1;
        Ok(())
    }

    fn wram_to_mram(&mut self, wram: u64, mram: u64, len: u64) -> Result<(), MachineError> {
        if len == 0 {
            return Ok(());
        }
        self.mram_check(mram, len)?;
        let range = self.guard(wram, len, 0, u64::MAX)?;
        self.state.mram.write(mram, &self.wram[range]).expect("bounds checked");
        self.dma_bytes += len;
        self.dma_ops += 1;
        Ok(())
    }

    /// Decodes `count` values at `offset`, which must lie in `[lo, hi)`.
    fn load(&self, offset: u64, count: u64, ty: kernel::ScalarType, lo: u64, hi: u64) -> Result<Vec<ScalarValue>, MachineError> {
        let w = ty.width();
        let range = self.guard(offset, count * w, lo, hi)?;
        Ok(self.wram[range].chunks_exact(w as usize).map(|b| ScalarValue::read_le(ty, b)).collect())
    }

    fn store(&mut self, offset: u64, values: &[ScalarValue], lo: u64, hi: u64) -> Result<(), MachineError> {
        let w = values.first().map_or(0, |v| v.ty().width());
        let range = self.guard(offset, values.len() as u64 * w, lo, hi)?;
        for (v, slot) in values.iter().zip(self.wram[range].chunks_exact_mut(w.max(1) as usize)) {
            v.write_le(slot);
        }
        Ok(())
    }

    /// Charges one parallel phase: tasklets run concurrently, the slowest one sets the pace.
    fn phase(&mut self, tasklet_ops: &[u64]) {
        self.ops += tasklet_ops.iter().sum::<u64>();
        let slowest = tasklet_ops.iter().copied().max().unwrap_or(0);
        self.compute_time += slowest as f64 / self.cfg.cost.dpu_ops_per_unit_time;
    }

    fn finish(self) -> LaunchStats {
        let c = &mut self.state.counters;
        let dma_time = self.dma_bytes as f64 / self.cfg.cost.wram_dma_bytes_per_unit_time;
        c.dma_bytes += self.dma_bytes;
        c.dma_ops += self.dma_ops;
        c.kernel_ops += self.ops;
        c.dma_time += dma_time;
        c.compute_time += self.compute_time;
        LaunchStats { dma_time, compute_time: self.compute_time }
    }
}

/// Elementwise stages of one pass with their per-element operator counts.
struct Chain<'p> {
    stages: Vec<(&'p Stage, u64)>,
}

impl<'p> Chain<'p> {
    fn new(all: &'p [Stage], which: &[usize]) -> Self {
        Chain {
            stages: which
                .iter()
                .map(|&i| {
                    let s = &all[i];
                    let ops = s.kernels().into_iter().map(kernel::op_count).sum();
                    (s, ops)
                })
                .collect(),
        }
    }

    /// Runs the chain on one element; `None` if a filter dropped it.
    fn apply(&self, mut row: Row, index: u64, env: &KernelEnv, ops: &mut u64) -> Result<Option<Row>, EvalError> {
        for (stage, cost) in &self.stages {
            *ops += cost;
            match stage {
                Stage::Map(f) => row = ([kernel::eval(f, &row.0[..row.1], index, env)?, row.0[1]], 1),
                Stage::Filter(p) => {
                    if kernel::eval(p, &row.0[..row.1], index, env)? != ScalarValue::Bool(true) {
                        return Ok(None);
                    }
                    row.1 = 1;
                }
                _ => unreachable!("blocking stage in an elementwise chain"),
            }
        }
        Ok(Some(row))
    }
}

fn row(cols: &[Vec<ScalarValue>], e: usize) -> Row {
    let mut r = [ScalarValue::Bool(false); 2];
    for (slot, col) in r.iter_mut().zip(cols) {
        *slot = col[e];
    }
    (r, cols.len())
}

/// Packs filter survivors into MRAM behind a count word. Bytes that do not
/// fill an 8-byte transfer unit stay in WRAM until the next tile or the end.
struct Compactor {
    carry: u64,
    written: u64,
    count: u64,
}

impl Compactor {
    fn append(&mut self, dpu: &mut Dpu<'_>, pass: &PassProgram, pass_no: usize, values: &[ScalarValue]) -> Result<(), MachineError> {
        let (lo, hi) = (pass.wram.output, pass.wram.output + pass.wram.output_bytes);
        let w = pass.output.ty.width();
        dpu.store(lo + self.carry, values, lo, hi)?;
        let total = self.carry + values.len() as u64 * w;
        let flush = total / TRANSFER_ALIGN * TRANSFER_ALIGN;
        self.flush(dpu, pass, pass_no, flush)?;
        let keep = lo as usize;
        dpu.wram.copy_within(keep + flush as usize..keep + total as usize, keep);
        self.carry = total - flush;
        self.count += values.len() as u64;
        Ok(())
    }

    fn flush(&mut self, dpu: &mut Dpu<'_>, pass: &PassProgram, pass_no: usize, bytes: u64) -> Result<(), MachineError> {
        let region = &pass.output;
        if self.written + bytes > region.bytes - TRANSFER_ALIGN {
            return Err(MachineError::RegionOverflow { dpu: dpu.id, pass: pass_no, region: region.name.clone() });
        }
        dpu.wram_to_mram(pass.wram.output, region.data_offset() + self.written, bytes)?;
        self.written += bytes;
        Ok(())
    }

    fn finish(mut self, dpu: &mut Dpu<'_>, pass: &PassProgram, pass_no: usize) -> Result<(), MachineError> {
        let out = pass.wram.output as usize;
        if self.carry > 0 {
            dpu.wram[out + self.carry as usize..out + TRANSFER_ALIGN as usize].fill(0);
            self.flush(dpu, pass, pass_no, TRANSFER_ALIGN)?;
        }
        dpu.wram[out..out + 8].copy_from_slice(&self.count.to_le_bytes());
        dpu.wram_to_mram(pass.wram.output, pass.output.offset, TRANSFER_ALIGN)
    }
}

pub(crate) fn run_program(
    state: &mut DpuState,
    id: u32,
    program: &DpuProgram<'_>,
    cfg: &PimMachineConfig,
) -> Result<LaunchStats, MachineError> {
    let args = program.args.get(id as usize).ok_or(MachineError::MissingArgs { dpu: id })?;
    let mut dpu = Dpu::new(id, state, cfg);
    let env = stage_broadcasts(&mut dpu, program)?;

    for (k, pass) in program.passes.iter().enumerate() {
        run_pass(&mut dpu, program, k, pass, &args.passes[k], &env)?;
    }
    Ok(dpu.finish())
}

/// Copies every broadcast buffer into WRAM and binds it for kernel loads.
fn stage_broadcasts(dpu: &mut Dpu<'_>, program: &DpuProgram<'_>) -> Result<KernelEnv, MachineError> {
    let mut env = KernelEnv::new();
    for b in &program.broadcasts {
        let bytes = b.len * b.ty.width();
        dpu.mram_to_wram(b.mram_offset, b.wram_offset, bytes)?;
        let values = dpu.load(b.wram_offset, b.len, b.ty, b.wram_offset, b.wram_offset + bytes)?;
        env = env.with(b.id, b.ty, values);
    }
    Ok(env)
}

fn run_pass(
    dpu: &mut Dpu<'_>,
    program: &DpuProgram<'_>,
    k: usize,
    pass: &PassProgram,
    counts: &PassCounts,
    env: &KernelEnv,
) -> Result<(), MachineError> {
    let stages = program.pipeline.stages();
    let chain = Chain::new(stages, &pass.elementwise);
    let tasklets = program.tasklets as u64;
    let w0 = pass.inputs[0].ty.width();
    let tiles = tiles_for(counts.positions, counts.inputs, pass.tile_positions, pass.overlap, w0, pass.wram.inputs[0]);
    let reducer: Option<&Reducer> = pass.kind.stage().and_then(|i| stages[i].reducer());
    let mut accs: Vec<AccValue> = match pass.kind {
        PassKind::Reduce { .. } => vec![reducer.expect("reduce stage").identity_value(); tasklets as usize],
        _ => Vec::new(),
    };
    let mut compactor = Compactor { carry: 0, written: 0, count: 0 };

    for (ti, tile) in tiles.iter().enumerate() {
        let fail = |element: u64, source: EvalError, dpu: u32| MachineError::Kernel { dpu, pass: k, tile: ti, element, source };

        let mut cols = Vec::with_capacity(pass.inputs.len());
        for (s, region) in pass.inputs.iter().enumerate() {
            let w = region.ty.width();
            let at = pass.wram.inputs[s];
            let bytes = tile.elements * w;
            dpu.mram_to_wram(region.offset + tile.first * w, at, bytes)?;
            cols.push(dpu.load(at, tile.elements, region.ty, at, at + bytes)?);
        }
        let base = counts.base_index + tile.first;
        let id = dpu.id;

        match pass.kind {
            PassKind::Elementwise | PassKind::Reduce { .. } => {
                let mut tasklet_ops = vec![0u64; tasklets as usize];
                let mut out = Vec::new();
                for t in 0..tasklets {
                    let ops = &mut tasklet_ops[t as usize];
                    for e in tasklet_chunk(tile.positions, tasklets, t) {
                        let idx = base + e;
                        let Some(r) = chain.apply(row(&cols, e as usize), idx, env, ops).map_err(|s| fail(idx, s, id))? else {
                            continue;
                        };
                        match reducer {
                            Some(red) => {
                                red.step(&mut accs[t as usize], &r.0[..r.1], idx, env).map_err(|s| fail(idx, s, id))?;
                                *ops += red.step_ops();
                            }
                            None => out.push(r.0[0]),
                        }
                    }
                }
                dpu.phase(&tasklet_ops);
                match pass.output_kind {
                    PassOutput::Dense => write_dense(dpu, pass, tile.first, &out)?,
                    PassOutput::Compacted => compactor.append(dpu, pass, k, &out)?,
                    PassOutput::Partial(_) => {}
                }
            }
            PassKind::Window { size, .. } | PassKind::Group { size, .. } => {
                let red = reducer.expect("blocking stage");
                let mut tasklet_ops = vec![0u64; tasklets as usize];
                let mut mapped = vec![ScalarValue::Bool(false); tile.elements as usize];
                for t in 0..tasklets {
                    let ops = &mut tasklet_ops[t as usize];
                    for e in tasklet_chunk(tile.elements, tasklets, t) {
                        let idx = base + e;
                        let r = chain.apply(row(&cols, e as usize), idx, env, ops).map_err(|s| fail(idx, s, id))?;
                        mapped[e as usize] = r.expect("dense chain").0[0];
                    }
                }
                dpu.phase(&tasklet_ops);

                let size = size as u64;
                let (outputs, span): (u64, Box<dyn Fn(u64) -> std::ops::Range<u64>>) = match pass.kind {
                    PassKind::Window { .. } => (tile.positions, Box::new(move |j| j..j + size)),
                    _ => {
                        let n = tile.elements;
                        (n.div_ceil(size), Box::new(move |g| g * size..((g + 1) * size).min(n)))
                    }
                };
                let mut tasklet_ops = vec![0u64; tasklets as usize];
                let mut out = vec![ScalarValue::Bool(false); outputs as usize];
                for t in 0..tasklets {
                    let ops = &mut tasklet_ops[t as usize];
                    for j in tasklet_chunk(outputs, tasklets, t) {
                        let mut acc = red.identity_value();
                        for e in span(j) {
                            let idx = base + e;
                            red.step(&mut acc, &mapped[e as usize..=e as usize], idx, env).map_err(|s| fail(idx, s, id))?;
                            *ops += red.step_ops();
                        }
                        out[j as usize] = acc.slots()[0];
                    }
                }
                dpu.phase(&tasklet_ops);
                let first_out = match pass.kind {
                    PassKind::Window { .. } => tile.first,
                    _ => tile.first / size,
                };
                write_dense(dpu, pass, first_out, &out)?;
            }
        }
    }

    match pass.output_kind {
        PassOutput::Compacted => compactor.finish(dpu, pass, k)?,
        PassOutput::Partial(acc_ty) => {
            let red = reducer.expect("reduce stage");
            let mut acc = accs[0].clone();
            for next in &accs[1..] {
                acc = red.combine(&acc, next, env).map_err(|source| MachineError::Kernel {
                    dpu: dpu.id,
                    pass: k,
                    tile: tiles.len(),
                    element: 0,
                    source,
                })?;
            }
            dpu.phase(&[red.combine_ops() * (tasklets - 1)]);
            let mut bytes = Vec::with_capacity(acc_ty.bytes() as usize);
            acc.encode(&mut bytes);
            let at = pass.wram.accumulators;
            let range = dpu.guard(at, bytes.len() as u64, at, at + pass.wram.accumulator_bytes)?;
            dpu.wram[range].copy_from_slice(&bytes);
            dpu.wram_to_mram(at, pass.output.offset, bytes.len() as u64)?;
        }
        PassOutput::Dense => {}
    }
    Ok(())
}

fn write_dense(dpu: &mut Dpu<'_>, pass: &PassProgram, first_out: u64, values: &[ScalarValue]) -> Result<(), MachineError> {
    let (lo, hi) = (pass.wram.output, pass.wram.output + pass.wram.output_bytes);
    dpu.store(lo, values, lo, hi)?;
    let w = pass.output.ty.width();
    dpu.wram_to_mram(lo, pass.output.offset + first_out * w, values.len() as u64 * w)
}

/// Folds the partials relayed into DPU 0, in slot order, into slot 0.
pub(crate) fn run_relay(
    state: &mut DpuState,
    id: u32,
    program: &DpuProgram<'_>,
    cfg: &PimMachineConfig,
) -> Result<LaunchStats, MachineError> {
    let relay = program.relay.as_ref().expect("relay program");
    let reducer = program.pipeline.stages()[relay.stage].reducer().expect("reduce stage");
    let mut dpu = Dpu::new(id, state, cfg);
    let env = stage_broadcasts(&mut dpu, program)?;
    let acc_bytes = relay.acc.bytes();
    let stride = round_up(acc_bytes, TRANSFER_ALIGN);
    let (acc_at, next_at) = (relay.wram_offset, relay.wram_offset + stride);
    let decode = |dpu: &Dpu<'_>, at: u64| -> Result<AccValue, MachineError> {
        let range = dpu.guard(at, acc_bytes, acc_at, next_at + stride)?;
        Ok(AccValue::decode(relay.acc, &dpu.wram[range]))
    };
    dpu.mram_to_wram(relay.region.offset, acc_at, acc_bytes)?;
    let mut acc = decode(&dpu, acc_at)?;
    let mut ops = 0;
    for slot in 1..relay.slots {
        dpu.mram_to_wram(relay.region.offset + slot * stride, next_at, acc_bytes)?;
        let next = decode(&dpu, next_at)?;
        acc = reducer
            .combine(&acc, &next, &env)
            .map_err(|source| MachineError::Kernel { dpu: id, pass: program.passes.len(), tile: 0, element: slot, source })?;
        ops += reducer.combine_ops();
    }
    dpu.phase(&[ops]);
    let mut bytes = Vec::new();
    acc.encode(&mut bytes);
    let range = dpu.guard(acc_at, acc_bytes, acc_at, next_at)?;
    dpu.wram[range].copy_from_slice(&bytes);
    dpu.wram_to_mram(acc_at, relay.region.offset, acc_bytes)?;
    Ok(dpu.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_in_order() {
        let lens: Vec<u64> = (0..16).map(|t| tasklet_chunk(10, 16, t).count() as u64).collect();
        assert_eq!(lens.iter().sum::<u64>(), 10);
        assert_eq!(&lens[..11], &[1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0]);
        let mut next = 0;
        for t in 0..4 {
            let c = tasklet_chunk(10, 4, t);
            assert_eq!(c.start, next);
            next = c.end;
        }
        assert_eq!(next, 10);
        assert_eq!(tasklet_chunk(10, 4, 0), 0..3);
        assert_eq!(tasklet_chunk(10, 4, 3), 8..10);
    }
}
