//! Algebraic laws of the primitives, checked on random cases.

use pimflow::kernel::{KernelEnv, ScalarType, ScalarValue};
use pimflow::machine::PimMachineConfig;
use pimflow::pipeline::{execute_stages, reference_execute, AccValue, Data, Pipeline, Reducer, Stage};
use pimflow::planner::{fuse_stages, HostStep};
use pimflow::runtime::{run, DpuCount, RunOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Case;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn stream(d: &Data) -> Option<(&[ScalarValue], &[u64])> {
    match d {
        Data::Stream { columns, indices } => Some((&columns[0], indices)),
        Data::Acc(_) => None,
    }
}

fn stream_len(d: &Data) -> Result<usize, String> {
    stream(d).map(|s| s.0.len()).ok_or_else(|| "expected a stream".into())
}

/// Steps every stage on its own and checks the length each one must produce.
pub fn length_laws(p: &Pipeline, inputs: &[Vec<ScalarValue>], env: &KernelEnv) -> Result<(), String> {
    let mut data = Data::dense(inputs.to_vec());
    for (i, stage) in p.stages().iter().enumerate() {
        let next = execute_stages(p, i..i + 1, data.clone(), env).map_err(|e| e.to_string())?;
        if let Some((before, before_idx)) = stream(&data) {
            let n = before.len();
            match stage {
                Stage::Map(_) => ensure!(stream_len(&next)? == n, "stage {i}: map changed the length"),
                Stage::Filter(_) => {
                    let (vals, idx) = stream(&next).ok_or("filter produced an accumulator")?;
                    // Survivors keep their value, index and relative order.
                    let mut k = 0;
                    for (v, ix) in vals.iter().zip(idx) {
                        while k < n && before_idx[k] != *ix {
                            k += 1;
                        }
                        ensure!(k < n, "stage {i}: index {ix} is not a later input index");
                        ensure!(before[k].bit_eq(v), "stage {i}: survivor {ix} changed value");
                        k += 1;
                    }
                }
                Stage::Reduce(r) => match &next {
                    Data::Acc(a) => ensure!(a.slots().len() == r.acc.slots(), "stage {i}: reduce slot count"),
                    Data::Stream { .. } => return Err(format!("stage {i}: reduce produced a stream")),
                },
                Stage::Window { size, .. } => {
                    ensure!(stream_len(&next)? == (n + 1).saturating_sub(*size), "stage {i}: window length")
                }
                Stage::Group { size, .. } => ensure!(stream_len(&next)? == n.div_ceil(*size), "stage {i}: group length"),
            }
        }
        data = next;
    }
    Ok(())
}

/// Output length of a simulated run equals the reference's.
pub fn simulated_length(c: &Case, dpus: u32) -> Result<(), String> {
    let expected = reference_execute(&c.pipeline, &c.inputs, &c.env).map_err(|e| e.to_string())?;
    let m = PimMachineConfig { ranks: 2, dpus_per_rank: 8, ..Default::default() };
    let o = RunOptions { dpus: DpuCount::Count(dpus), ..Default::default() };
    let got = run(&c.pipeline, &c.inputs, &c.env, &m, &o).map_err(|e| e.to_string())?;
    ensure!(got.output.values().len() == expected.values().len(), "simulated length differs");
    Ok(())
}

/// Each primitive alone, on the simulator, produces the length its law gives.
pub fn single_stage_lengths(seed: u64, n: usize, size: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = super::env(&mut rng);
    let xs = super::values(&mut rng, ScalarType::Int32, n);
    let r = super::scalar_reducer(&mut rng, true);
    let stages = [
        (Stage::Map(super::expr(&mut rng, ScalarType::Int32, ScalarType::Int32, false, 2)), Some(n)),
        (Stage::Filter(super::predicate(&mut rng, ScalarType::Int32, false, 2)), None),
        (Stage::Reduce(super::scalar_reducer(&mut rng, false)), Some(1)),
        (Stage::Window { size, reducer: r.clone() }, Some((n + 1).saturating_sub(size))),
        (Stage::Group { size, reducer: r }, Some(n.div_ceil(size))),
    ];
    let m = PimMachineConfig { ranks: 1, dpus_per_rank: 7, ..Default::default() };
    for (stage, len) in stages {
        let name = stage.name();
        let broadcasts = [(super::BUF, ScalarType::Int32)].into_iter().collect();
        let p = Pipeline::build(vec![ScalarType::Int32], broadcasts, vec![stage]).map_err(|e| e.to_string())?;
        let got = run(&p, std::slice::from_ref(&xs), &env, &m, &RunOptions::default()).map_err(|e| e.to_string())?.output;
        let l = got.values().len();
        match len {
            Some(want) => ensure!(l == want, "{name}: length {l}, expected {want} (n = {n}, size = {size})"),
            None => ensure!(l <= n, "{name}: length {l} exceeds {n}"),
        }
    }
    Ok(())
}

/// A reachable accumulator value: the fold of a few random elements.
fn acc_of(r: &Reducer, rng: &mut ChaCha8Rng, env: &KernelEnv) -> AccValue {
    let mut acc = r.identity_value();
    let n = rng.gen_range(0..6);
    let xs = super::values(rng, ScalarType::Int32, n);
    for (k, x) in xs.iter().enumerate() {
        r.step(&mut acc, &[*x], rng.gen_range(0..1000) + k as u64, env).unwrap();
    }
    acc
}

fn fold(r: &Reducer, xs: &[ScalarValue], first_index: u64, env: &KernelEnv) -> AccValue {
    let mut acc = r.identity_value();
    for (k, x) in xs.iter().enumerate() {
        r.step(&mut acc, &[*x], first_index + k as u64, env).unwrap();
    }
    acc
}

/// Identity, associativity and commutativity of a random reduce-stage
/// reducer, plus the split-fold homomorphism the partials rely on.
pub fn reducer_laws(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = super::env(&mut rng);
    let r = if rng.gen_bool(0.3) { super::histogram_reducer(&mut rng) } else { super::scalar_reducer(&mut rng, false) };
    let id = r.identity_value();
    let (a, b, c) = (acc_of(&r, &mut rng, &env), acc_of(&r, &mut rng, &env), acc_of(&r, &mut rng, &env));
    let comb = |x: &AccValue, y: &AccValue| r.combine(x, y, &env).unwrap();
    ensure!(comb(&id, &a) == a && comb(&a, &id) == a, "identity law fails for {a:?}");
    ensure!(comb(&comb(&a, &b), &c) == comb(&a, &comb(&b, &c)), "associativity fails");
    ensure!(comb(&a, &b) == comb(&b, &a), "commutativity fails");
    let len = rng.gen_range(0..40);
    let xs = super::values(&mut rng, ScalarType::Int32, len);
    let cut = rng.gen_range(0..=xs.len());
    let whole = fold(&r, &xs, 0, &env);
    let split = comb(&fold(&r, &xs[..cut], 0, &env), &fold(&r, &xs[cut..], cut as u64, &env));
    ensure!(whole == split, "folding a split stream differs at cut {cut}");
    Ok(())
}

/// Runs the planner's device passes and host residue one after another on the
/// reference evaluator, with every pass over the whole stream.
fn fused_sequential(p: &Pipeline, inputs: &[Vec<ScalarValue>], env: &KernelEnv, cpu_split: bool) -> Result<Data, String> {
    let f = fuse_stages(p, cpu_split);
    let mut data = Data::dense(inputs.to_vec());
    let steps = f.passes.iter().flat_map(|q| q.stages().collect::<Vec<_>>()).chain(f.residue.iter().filter_map(|s| match s {
        // A single partial covering the whole stream combines to itself.
        HostStep::CombinePartials => None,
        HostStep::Stage(i) => Some(*i),
    }));
    for i in steps {
        data = execute_stages(p, i..i + 1, data, env).map_err(|e| e.to_string())?;
    }
    Ok(data)
}

/// Splits the stream into random blocks, runs the first pass on each block and
/// merges the results the way the runtime gathers them.
fn blocked_first_pass(p: &Pipeline, inputs: &[Vec<ScalarValue>], env: &KernelEnv, rng: &mut ChaCha8Rng) -> Option<Data> {
    let f = fuse_stages(p, true);
    let pass = f.passes.first()?;
    if pass.blocking.is_some_and(|b| !matches!(p.stages()[b], Stage::Reduce(_))) {
        return None;
    }
    let n = inputs[0].len();
    let mut cuts: Vec<usize> = (0..rng.gen_range(0..5)).map(|_| rng.gen_range(0..=n)).collect();
    cuts.extend([0, n]);
    cuts.sort_unstable();
    let (mut vals, mut idxs, mut acc): (Vec<ScalarValue>, Vec<u64>, Option<AccValue>) = (vec![], vec![], None);
    for w in cuts.windows(2) {
        let cols = inputs.iter().map(|c| c[w[0]..w[1]].to_vec()).collect();
        let mut d = Data::Stream { columns: cols, indices: (w[0] as u64..w[1] as u64).collect() };
        for i in pass.stages() {
            d = execute_stages(p, i..i + 1, d, env).unwrap();
        }
        match d {
            Data::Stream { columns, indices } => {
                vals.extend(&columns[0]);
                idxs.extend(indices);
            }
            Data::Acc(a) => {
                let r = p.stages()[pass.blocking.unwrap()].reducer().unwrap();
                acc = Some(match acc {
                    None => a,
                    Some(prev) => r.combine(&prev, &a, env).unwrap(),
                });
            }
        }
    }
    let mut data = match acc {
        Some(a) => Data::Acc(a),
        None => Data::Stream { columns: vec![vals], indices: idxs },
    };
    let rest = f.passes[1..].iter().flat_map(|q| q.stages().collect::<Vec<_>>());
    let residue = f.residue.iter().filter_map(|s| match s {
        HostStep::Stage(i) => Some(*i),
        HostStep::CombinePartials => None,
    });
    for i in rest.chain(residue) {
        data = execute_stages(p, i..i + 1, data, env).unwrap();
    }
    Some(data)
}

/// Device passes followed by host residue equal the unfused stage list.
pub fn fusion_invariance(c: &Case, seed: u64) -> Result<(), String> {
    let expected = reference_execute(&c.pipeline, &c.inputs, &c.env).map_err(|e| e.to_string())?;
    for cpu_split in [true, false] {
        let f = fuse_stages(&c.pipeline, cpu_split);
        let mut order: Vec<usize> = f.passes.iter().flat_map(|p| p.stages().collect::<Vec<_>>()).collect();
        order.extend(f.residue.iter().filter_map(|s| match s {
            HostStep::Stage(i) => Some(*i),
            HostStep::CombinePartials => None,
        }));
        ensure!(order == (0..c.pipeline.stages().len()).collect::<Vec<_>>(), "stages covered as {order:?}");
        let got = fused_sequential(&c.pipeline, &c.inputs, &c.env, cpu_split)?.into_output();
        ensure!(got.bit_eq(&expected), "fused execution differs (cpu_split = {cpu_split})");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    if let Some(d) = blocked_first_pass(&c.pipeline, &c.inputs, &c.env, &mut rng) {
        ensure!(d.into_output().bit_eq(&expected), "block-split first pass differs");
    }
    Ok(())
}
