//! The six benchmark workloads, expressed as pipelines over seeded inputs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::kernel::{BufferId, Expr, KernelEnv, ScalarType, ScalarValue};
use crate::pipeline::{Output, Pipeline, Reducer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadKind {
    Vecadd,
    Select,
    Reduce,
    Unique,
    Histogram,
    Gemv,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 6] = [
        WorkloadKind::Vecadd,
        WorkloadKind::Select,
        WorkloadKind::Reduce,
        WorkloadKind::Unique,
        WorkloadKind::Histogram,
        WorkloadKind::Gemv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::Vecadd => "vecadd",
            WorkloadKind::Select => "select",
            WorkloadKind::Reduce => "reduce",
            WorkloadKind::Unique => "unique",
            WorkloadKind::Histogram => "histogram",
            WorkloadKind::Gemv => "gemv",
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkloadKind {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, SpecError> {
        Self::ALL.into_iter().find(|w| w.name() == s).ok_or_else(|| SpecError::UnknownWorkload(s.to_string()))
    }
}

/// Predicate of the select workload.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Predicate {
    #[default]
    Even,
    Odd,
    /// Keep values strictly below the bound.
    Lt(i64),
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Even => f.write_str("even"),
            Predicate::Odd => f.write_str("odd"),
            Predicate::Lt(v) => write!(f, "lt:{v}"),
        }
    }
}

impl FromStr for Predicate {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, SpecError> {
        match s {
            "even" => Ok(Predicate::Even),
            "odd" => Ok(Predicate::Odd),
            _ => s
                .strip_prefix("lt:")
                .and_then(|v| v.parse().ok())
                .map(Predicate::Lt)
                .ok_or_else(|| SpecError::BadSpec(format!("unknown predicate `{s}` (even, odd, lt:<value>)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("unknown workload `{0}`")]
    UnknownWorkload(String),
    #[error("bad workload spec: {0}")]
    BadSpec(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Stream length; for gemv, the number of matrix rows.
    pub n: u64,
    /// gemv matrix shape; `rows` defaults to `n`.
    pub rows: Option<u64>,
    pub cols: u64,
    pub bins: u64,
    /// Histogram inputs are drawn from `0..range`.
    pub range: u64,
    pub seed: u64,
    pub elem: ScalarType,
    pub predicate: Predicate,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, n: u64, seed: u64) -> Self {
        WorkloadSpec {
            kind,
            n,
            rows: None,
            cols: 8,
            bins: 256,
            range: 256,
            seed,
            elem: ScalarType::Int32,
            predicate: Predicate::Even,
        }
    }

    pub fn rows(&self) -> u64 {
        self.rows.unwrap_or(self.n)
    }

    /// Length of the input stream.
    pub fn stream_len(&self) -> u64 {
        match self.kind {
            WorkloadKind::Gemv => self.rows() * self.cols,
            _ => self.n,
        }
    }

    fn check(&self) -> Result<(), SpecError> {
        let bad = |m: String| Err(SpecError::BadSpec(m));
        match self.elem {
            ScalarType::Int32 => {}
            ScalarType::Int64 if matches!(self.kind, WorkloadKind::Vecadd | WorkloadKind::Select | WorkloadKind::Reduce) => {}
            t => return bad(format!("{} does not support {t} elements", self.kind)),
        }
        if self.kind == WorkloadKind::Gemv && self.cols == 0 {
            return bad("gemv needs at least one column".into());
        }
        if self.kind == WorkloadKind::Histogram {
            if self.bins == 0 || self.bins > 4096 {
                return bad(format!("bins must be in 1..=4096, got {}", self.bins));
            }
            if self.range == 0 || self.range > i32::MAX as u64 {
                return bad(format!("histogram range must be in 1..=2^31-1, got {}", self.range));
            }
        }
        if self.stream_len() > 1 << 32 {
            return bad("stream longer than 2^32 elements".into());
        }
        Ok(())
    }
}

/// Host-side step applied to both the simulated and the reference output.
#[derive(Debug, Clone, PartialEq)]
pub enum Epilogue {
    None,
    /// Prepends the first input element to a non-empty stream input.
    PrependFirst(Option<ScalarValue>),
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub spec: WorkloadSpec,
    pub pipeline: Pipeline,
    pub inputs: Vec<Vec<ScalarValue>>,
    pub env: KernelEnv,
    pub epilogue: Epilogue,
}

impl Workload {
    pub fn finish(&self, out: Output) -> Output {
        match (&self.epilogue, out) {
            (Epilogue::PrependFirst(Some(first)), Output::Stream(mut v)) => {
                v.insert(0, *first);
                Output::Stream(v)
            }
            (_, out) => out,
        }
    }
}

/// Broadcast buffer holding the gemv vector.
pub const GEMV_VECTOR: BufferId = BufferId(0);

const TWO_32: i64 = 1 << 32;

pub fn vecadd(elem: ScalarType) -> Pipeline {
    Pipeline::builder().input(elem).input(elem).map(Expr::input(0) + Expr::input(1)).build().expect("valid pipeline")
}

pub fn select(elem: ScalarType, predicate: Predicate) -> Pipeline {
    let c = |v: i64| match elem {
        ScalarType::Int32 => Expr::i32(v as i32),
        _ => Expr::i64(v),
    };
    let keep = match predicate {
        Predicate::Even => (Expr::input(0) % c(2)).eq_(c(0)),
        Predicate::Odd => (Expr::input(0) % c(2)).ne_(c(0)),
        Predicate::Lt(v) => Expr::input(0).widen().lt(Expr::i64(v)),
    };
    Pipeline::builder().input(elem).filter(keep).build().expect("valid pipeline")
}

pub fn reduce(elem: ScalarType) -> Pipeline {
    Pipeline::builder().input(elem).reduce(Reducer::sum_into_i64()).build().expect("valid pipeline")
}

/// Consecutive-duplicate removal. A width-2 window packs each adjacent pair
/// as `prev * 2^32 + cur`; pairs with equal halves are dropped and the
/// current element is unpacked. The first element is prepended on the host.
pub fn unique() -> Pipeline {
    let pair = Reducer::scalar(
        ScalarType::Int64,
        ScalarValue::Int64(0),
        Expr::input(0) * Expr::i64(TWO_32) + Expr::input(1).widen(),
        Expr::input(0) * Expr::i64(TWO_32) + Expr::input(1),
    );
    let cur = Expr::input(0).narrow().widen();
    let prev = (Expr::input(0) - cur.clone()) / Expr::i64(TWO_32);
    Pipeline::builder()
        .input(ScalarType::Int32)
        .window(2, pair)
        .filter(prev.ne_(cur))
        .map(Expr::input(0).narrow())
        .build()
        .expect("valid pipeline")
}

/// Bin `clamp(x * bins / range, 0, bins - 1)` counted into an `Int64[bins]` accumulator.
pub fn histogram(bins: u64, range: u64) -> Pipeline {
    let bin = (Expr::input(0).widen() * Expr::i64(bins as i64) / Expr::i64(range as i64))
        .max(Expr::i64(0))
        .min(Expr::i64(bins as i64 - 1));
    Pipeline::builder().input(ScalarType::Int32).map(bin).reduce(Reducer::histogram(bins as usize)).build().expect("valid pipeline")
}

/// Row-major matrix times the broadcast vector, one `Int64` per row.
pub fn gemv(cols: u64) -> Pipeline {
    let v = Expr::load(GEMV_VECTOR, Expr::gidx() % Expr::i64(cols as i64));
    Pipeline::builder()
        .input(ScalarType::Int32)
        .broadcast(GEMV_VECTOR, ScalarType::Int32)
        .map(Expr::input(0).widen() * v.widen())
        .group(cols as usize, Reducer::sum(ScalarType::Int64))
        .build()
        .expect("valid pipeline")
}

fn ints(elem: ScalarType, values: impl Iterator<Item = i64>) -> Vec<ScalarValue> {
    match elem {
        ScalarType::Int64 => values.map(ScalarValue::Int64).collect(),
        _ => values.map(|v| ScalarValue::Int32(v as i32)).collect(),
    }
}

/// Pipeline plus deterministic inputs drawn from `spec.seed`.
pub fn build_workload(spec: &WorkloadSpec) -> Result<Workload, SpecError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.stream_len() as usize;
    let elem = spec.elem;
    let wide = |rng: &mut ChaCha8Rng| match elem {
        ScalarType::Int64 => rng.gen::<i64>(),
        _ => rng.gen::<i32>() as i64,
    };
    let mut env = KernelEnv::new();
    let mut epilogue = Epilogue::None;
    let (pipeline, inputs) = match spec.kind {
        WorkloadKind::Vecadd => {
            let a = ints(elem, (0..n).map(|_| wide(&mut rng)));
            let b = ints(elem, (0..n).map(|_| wide(&mut rng)));
            (vecadd(elem), vec![a, b])
        }
        WorkloadKind::Select => (select(elem, spec.predicate), vec![ints(elem, (0..n).map(|_| wide(&mut rng)))]),
        WorkloadKind::Reduce => (reduce(elem), vec![ints(elem, (0..n).map(|_| wide(&mut rng)))]),
        WorkloadKind::Unique => {
            // Runs of repeated values, so roughly half the pairs are duplicates.
            let mut x: i32 = rng.gen_range(-1000..1000);
            let values: Vec<ScalarValue> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        x = x.wrapping_add(rng.gen_range(-3..=3));
                    }
                    ScalarValue::Int32(x)
                })
                .collect();
            epilogue = Epilogue::PrependFirst(values.first().copied());
            (unique(), vec![values])
        }
        WorkloadKind::Histogram => {
            let values = (0..n).map(|_| ScalarValue::Int32(rng.gen_range(0..spec.range) as i32)).collect();
            (histogram(spec.bins, spec.range), vec![values])
        }
        WorkloadKind::Gemv => {
            let matrix = (0..n).map(|_| ScalarValue::Int32(rng.gen_range(-100..=100))).collect();
            let v = (0..spec.cols).map(|_| ScalarValue::Int32(rng.gen_range(-100..=100))).collect();
            env = env.with(GEMV_VECTOR, ScalarType::Int32, v);
            (gemv(spec.cols), vec![matrix])
        }
    };
    Ok(Workload { spec: spec.clone(), pipeline, inputs, env, epilogue })
}

/// Builder statements per workload definition.
pub fn loc_report() -> Vec<(WorkloadKind, usize)> {
    WorkloadKind::ALL
        .into_iter()
        .map(|k| {
            let p = match k {
                WorkloadKind::Vecadd => vecadd(ScalarType::Int32),
                WorkloadKind::Select => select(ScalarType::Int32, Predicate::Even),
                WorkloadKind::Reduce => reduce(ScalarType::Int32),
                WorkloadKind::Unique => unique(),
                WorkloadKind::Histogram => histogram(256, 256),
                WorkloadKind::Gemv => gemv(8),
            };
            (k, p.statements())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::reference_execute;
    use proptest::prelude::*;

    fn i32s(v: &[i32]) -> Vec<ScalarValue> {
        v.iter().map(|&x| ScalarValue::Int32(x)).collect()
    }

    fn i64s(v: &[i64]) -> Output {
        Output::Stream(v.iter().map(|&x| ScalarValue::Int64(x)).collect())
    }

    #[test]
    fn gemv_row_sums() {
        let env = KernelEnv::new().with(GEMV_VECTOR, ScalarType::Int32, i32s(&[1, 1]));
        let out = reference_execute(&gemv(2), &[i32s(&[1, 2, 3, 4])], &env).unwrap();
        assert_eq!(out, i64s(&[3, 7]));
    }

    #[test]
    fn histogram_counts() {
        let out = reference_execute(&histogram(4, 4), &[i32s(&[0, 1, 1, 3])], &KernelEnv::new()).unwrap();
        assert_eq!(out, Output::Array([1, 2, 0, 1].map(ScalarValue::Int64).to_vec()));
    }

    fn dedup(values: &[i32]) -> Output {
        let w = Workload {
            spec: WorkloadSpec::new(WorkloadKind::Unique, values.len() as u64, 0),
            pipeline: unique(),
            inputs: vec![i32s(values)],
            env: KernelEnv::new(),
            epilogue: Epilogue::PrependFirst(i32s(values).first().copied()),
        };
        w.finish(reference_execute(&w.pipeline, &w.inputs, &w.env).unwrap())
    }

    #[test]
    fn unique_removes_adjacent_duplicates() {
        assert_eq!(dedup(&[1, 1, 2, 2, 2, 3]), Output::Stream(i32s(&[1, 2, 3])));
        assert_eq!(dedup(&[]), Output::Stream(vec![]));
        assert_eq!(dedup(&[5]), Output::Stream(i32s(&[5])));
        assert_eq!(dedup(&[i32::MIN, i32::MIN, -1, i32::MAX, i32::MAX, 0]), Output::Stream(i32s(&[i32::MIN, -1, i32::MAX, 0])));
    }

    proptest! {
        #[test]
        fn unique_matches_vec_dedup(values in prop::collection::vec(prop_oneof![-3i32..3, any::<i32>()], 0..64)) {
            let mut expect = values.clone();
            expect.dedup();
            prop_assert_eq!(dedup(&values), Output::Stream(i32s(&expect)));
        }

        #[test]
        fn histogram_bins_sum_to_n(seed in any::<u64>(), n in 0u64..500, bins in 1u64..300) {
            let spec = WorkloadSpec { bins, ..WorkloadSpec::new(WorkloadKind::Histogram, n, seed) };
            let w = build_workload(&spec).unwrap();
            let out = reference_execute(&w.pipeline, &w.inputs, &w.env).unwrap();
            prop_assert_eq!(out.values().len() as u64, bins);
            let total: i64 = out.values().iter().map(|v| v.as_i64().unwrap()).sum();
            prop_assert_eq!(total as u64, n);
        }
    }

    #[test]
    fn inputs_are_seeded() {
        for kind in WorkloadKind::ALL {
            let a = build_workload(&WorkloadSpec::new(kind, 100, 7)).unwrap();
            let b = build_workload(&WorkloadSpec::new(kind, 100, 7)).unwrap();
            let c = build_workload(&WorkloadSpec::new(kind, 100, 8)).unwrap();
            assert_eq!(a.inputs, b.inputs);
            assert_ne!(a.inputs, c.inputs);
        }
    }

    #[test]
    fn gemv_size_is_rows() {
        let w = build_workload(&WorkloadSpec::new(WorkloadKind::Gemv, 10, 1)).unwrap();
        assert_eq!(w.inputs[0].len(), 80);
        let out = reference_execute(&w.pipeline, &w.inputs, &w.env).unwrap();
        assert_eq!(out.values().len(), 10);
    }

    #[test]
    fn loc_is_small_and_stable() {
        let a = loc_report();
        assert_eq!(a, loc_report());
        assert!(a.iter().all(|&(_, n)| (1..=20).contains(&n)));
    }

    #[test]
    fn bad_specs() {
        assert!(matches!("nope".parse::<WorkloadKind>(), Err(SpecError::UnknownWorkload(_))));
        assert_eq!("lt:-5".parse::<Predicate>().unwrap(), Predicate::Lt(-5));
        assert!("lt:x".parse::<Predicate>().is_err());
        let spec = WorkloadSpec { elem: ScalarType::Int64, ..WorkloadSpec::new(WorkloadKind::Gemv, 1, 0) };
        assert!(build_workload(&spec).is_err());
        let spec = WorkloadSpec { bins: 0, ..WorkloadSpec::new(WorkloadKind::Histogram, 1, 0) };
        assert!(build_workload(&spec).is_err());
    }
}
