//! Dataflow pipelines of pattern stages and their sequential reference
//! semantics.
//!
//! A [`Pipeline`] is a linear list of stages over one input stream (or two
//! aligned streams zipped by a leading `map`). Every element of a stream
//! carries a global index that kernels can read as `gidx`:
//!
//! * `map` keeps the index of its input element;
//! * `filter` survivors keep their **original** index, they are not renumbered;
//! * `window` / `group` outputs are indexed by output position;
//! * after a scalar `reduce` the value has index 0.
//!
//! [`reference_execute`] runs stages strictly in order, left to right, on a
//! single thread. It is the definition every simulated run is checked
//! against, and the host side of a run reuses it for residue stages.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::kernel::{self, BufferId, EnvTypes, EvalError, Expr, KernelEnv, ScalarType, ScalarValue, TypeError};

/// Accumulator shape of a reducer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum AccType {
    Scalar(ScalarType),
    Array { elem: ScalarType, len: usize },
}

impl AccType {
    pub fn elem(&self) -> ScalarType {
        match *self {
            AccType::Scalar(t) | AccType::Array { elem: t, .. } => t,
        }
    }

    pub fn slots(&self) -> usize {
        match *self {
            AccType::Scalar(_) => 1,
            AccType::Array { len, .. } => len,
        }
    }

    pub fn bytes(&self) -> u64 {
        self.elem().width() * self.slots() as u64
    }
}

/// Accumulator value. Scalar accumulators hold exactly one slot.
#[derive(Debug, Clone, PartialEq)]
pub enum AccValue {
    Scalar(ScalarValue),
    Array(Vec<ScalarValue>),
}

impl AccValue {
    pub fn slots(&self) -> &[ScalarValue] {
        match self {
            AccValue::Scalar(v) => std::slice::from_ref(v),
            AccValue::Array(v) => v,
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        for v in self.slots() {
            let w = v.ty().width() as usize;
            let at = out.len();
            out.resize(at + w, 0);
            v.write_le(&mut out[at..]);
        }
    }

    pub fn decode(acc: AccType, bytes: &[u8]) -> Self {
        let elem = acc.elem();
        let w = elem.width() as usize;
        match acc {
            AccType::Scalar(t) => AccValue::Scalar(ScalarValue::read_le(t, bytes)),
            AccType::Array { len, .. } => {
                AccValue::Array((0..len).map(|i| ScalarValue::read_le(elem, &bytes[i * w..])).collect())
            }
        }
    }
}

/// How a reducer folds one element into its accumulator.
#[derive(Debug, Clone, PartialEq)]
pub enum ReduceStep {
    /// `acc = step(in0 = acc, in1.. = element)`.
    Fold(Expr),
    /// Array accumulators: `slot = index(in0.. = element)` then
    /// `acc[slot] = update(in0 = acc[slot], in1.. = element)`.
    Scatter { index: Expr, update: Expr },
}

/// A fold described by (identity, step, combine).
///
/// `combine` sees `in0 = a`, `in1 = b` and is applied slot-wise for array
/// accumulators, with `gidx` bound to the slot number. Reducers used by a
/// `reduce` stage must make `combine` associative and commutative with
/// `identity` as its unit; partial results are combined in an order that
/// depends on the partitioning.
#[derive(Debug, Clone, PartialEq)]
pub struct Reducer {
    pub acc: AccType,
    pub identity: ScalarValue,
    pub step: ReduceStep,
    pub combine: Expr,
}

impl Reducer {
    pub fn scalar(acc: ScalarType, identity: ScalarValue, step: Expr, combine: Expr) -> Self {
        Reducer { acc: AccType::Scalar(acc), identity, step: ReduceStep::Fold(step), combine }
    }

    pub fn array(elem: ScalarType, len: usize, identity: ScalarValue, index: Expr, update: Expr, combine: Expr) -> Self {
        Reducer { acc: AccType::Array { elem, len }, identity, step: ReduceStep::Scatter { index, update }, combine }
    }

    /// Wrapping sum in the element type.
    pub fn sum(ty: ScalarType) -> Self {
        let add = Expr::input(0) + Expr::input(1);
        Self::scalar(ty, ScalarValue::zero(ty), add.clone(), add)
    }

    /// Sum of integer elements into an `Int64` accumulator.
    pub fn sum_into_i64() -> Self {
        Self::scalar(
            ScalarType::Int64,
            ScalarValue::Int64(0),
            Expr::input(0) + Expr::input(1).widen(),
            Expr::input(0) + Expr::input(1),
        )
    }

    pub fn min_i64() -> Self {
        let m = Expr::input(0).min(Expr::input(1));
        Self::scalar(ScalarType::Int64, ScalarValue::Int64(i64::MAX), m.clone(), m)
    }

    pub fn max_i64() -> Self {
        let m = Expr::input(0).max(Expr::input(1));
        Self::scalar(ScalarType::Int64, ScalarValue::Int64(i64::MIN), m.clone(), m)
    }

    /// Counts elements per bin; each element is its own (integer) bin index.
    pub fn histogram(bins: usize) -> Self {
        Self::array(
            ScalarType::Int64,
            bins,
            ScalarValue::Int64(0),
            Expr::input(0),
            Expr::input(0) + Expr::i64(1),
            Expr::input(0) + Expr::input(1),
        )
    }

    pub fn identity_value(&self) -> AccValue {
        match self.acc {
            AccType::Scalar(_) => AccValue::Scalar(self.identity),
            AccType::Array { len, .. } => AccValue::Array(vec![self.identity; len]),
        }
    }

    /// Folds one element (one value per input slot) into `acc`.
    pub fn step(&self, acc: &mut AccValue, element: &[ScalarValue], index: u64, env: &KernelEnv) -> Result<(), EvalError> {
        match (&self.step, acc) {
            (ReduceStep::Fold(step), AccValue::Scalar(a)) => {
                let mut args = [*a, ScalarValue::Bool(false), ScalarValue::Bool(false)];
                args[1..=element.len()].copy_from_slice(element);
                *a = kernel::eval(step, &args[..=element.len()], index, env)?;
                Ok(())
            }
            (ReduceStep::Scatter { index: slot_expr, update }, AccValue::Array(slots)) => {
                let slot = kernel::eval(slot_expr, element, index, env)?
                    .as_i64()
                    .ok_or_else(|| EvalError::IllTyped("non-integer accumulator slot".into()))?;
                if slot < 0 || slot as u64 >= slots.len() as u64 {
                    return Err(EvalError::AccumulatorIndexOutOfBounds { slot, len: slots.len(), index });
                }
                let cell = &mut slots[slot as usize];
                let mut args = [*cell, ScalarValue::Bool(false), ScalarValue::Bool(false)];
                args[1..=element.len()].copy_from_slice(element);
                *cell = kernel::eval(update, &args[..=element.len()], index, env)?;
                Ok(())
            }
            _ => Err(EvalError::IllTyped("accumulator shape does not match reducer".into())),
        }
    }

    pub fn combine(&self, a: &AccValue, b: &AccValue, env: &KernelEnv) -> Result<AccValue, EvalError> {
        match (a, b) {
            (AccValue::Scalar(x), AccValue::Scalar(y)) => Ok(AccValue::Scalar(kernel::eval(&self.combine, &[*x, *y], 0, env)?)),
            (AccValue::Array(x), AccValue::Array(y)) if x.len() == y.len() => x
                .iter()
                .zip(y)
                .enumerate()
                .map(|(slot, (x, y))| kernel::eval(&self.combine, &[*x, *y], slot as u64, env))
                .collect::<Result<Vec<_>, _>>()
                .map(AccValue::Array),
            _ => Err(EvalError::IllTyped("combining accumulators of different shapes".into())),
        }
    }

    /// Operator nodes evaluated per folded element.
    pub fn step_ops(&self) -> u64 {
        match &self.step {
            ReduceStep::Fold(e) => kernel::op_count(e),
            ReduceStep::Scatter { index, update } => kernel::op_count(index) + kernel::op_count(update),
        }
    }

    /// Operator nodes evaluated per combine of two accumulators.
    pub fn combine_ops(&self) -> u64 {
        kernel::op_count(&self.combine) * self.acc.slots() as u64
    }

    pub fn kernels(&self) -> Vec<&Expr> {
        match &self.step {
            ReduceStep::Fold(s) => vec![s, &self.combine],
            ReduceStep::Scatter { index, update } => vec![index, update, &self.combine],
        }
    }

    pub fn uses_global_index(&self) -> bool {
        match &self.step {
            ReduceStep::Fold(s) => s.uses_global_index(),
            ReduceStep::Scatter { index, update } => index.uses_global_index() || update.uses_global_index(),
        }
    }

    fn check(&self, elems: &[ScalarType], env: &EnvTypes, stage: usize) -> Result<(), PipelineError> {
        let acc = self.acc.elem();
        let kerr = |source| PipelineError::Kernel { stage, source };
        let expect = |what: &str, got: ScalarType, want: ScalarType| {
            if got == want {
                Ok(())
            } else {
                Err(PipelineError::StageTypeMismatch {
                    stage,
                    detail: format!("reducer {what} yields {got}, accumulator is {want}"),
                })
            }
        };
        if let AccType::Array { len: 0, .. } = self.acc {
            return Err(PipelineError::StageTypeMismatch { stage, detail: "array accumulator of length 0".into() });
        }
        expect("identity", self.identity.ty(), acc)?;
        let mut with_acc = vec![acc];
        with_acc.extend_from_slice(elems);
        match &self.step {
            ReduceStep::Fold(step) => {
                if matches!(self.acc, AccType::Array { .. }) {
                    return Err(PipelineError::StageTypeMismatch {
                        stage,
                        detail: "array accumulators need an index/update step".into(),
                    });
                }
                expect("step", kernel::type_check(step, &with_acc, env).map_err(kerr)?, acc)?;
            }
            ReduceStep::Scatter { index, update } => {
                if matches!(self.acc, AccType::Scalar(_)) {
                    return Err(PipelineError::StageTypeMismatch {
                        stage,
                        detail: "index/update steps need an array accumulator".into(),
                    });
                }
                let it = kernel::type_check(index, elems, env).map_err(kerr)?;
                if !it.is_integer() {
                    return Err(PipelineError::StageTypeMismatch { stage, detail: format!("accumulator slot index is {it}") });
                }
                expect("update", kernel::type_check(update, &with_acc, env).map_err(kerr)?, acc)?;
            }
        }
        expect("combine", kernel::type_check(&self.combine, &[acc, acc], env).map_err(kerr)?, acc)
    }
}

/// One pattern stage.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Map(Expr),
    Filter(Expr),
    Reduce(Reducer),
    Window { size: usize, reducer: Reducer },
    Group { size: usize, reducer: Reducer },
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Map(_) => "map",
            Stage::Filter(_) => "filter",
            Stage::Reduce(_) => "reduce",
            Stage::Window { .. } => "window",
            Stage::Group { .. } => "group",
        }
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(self, Stage::Map(_) | Stage::Filter(_))
    }

    pub fn reducer(&self) -> Option<&Reducer> {
        match self {
            Stage::Reduce(r) | Stage::Window { reducer: r, .. } | Stage::Group { reducer: r, .. } => Some(r),
            _ => None,
        }
    }

    pub fn kernels(&self) -> Vec<&Expr> {
        match self {
            Stage::Map(e) | Stage::Filter(e) => vec![e],
            _ => self.reducer().map(Reducer::kernels).unwrap_or_default(),
        }
    }
}

/// Shape of the value flowing between stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum DataType {
    Stream(ScalarType),
    Scalar(ScalarType),
    Array { elem: ScalarType, len: usize },
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataType::Stream(t) => write!(f, "stream<{t}>"),
            DataType::Scalar(t) => write!(f, "{t}"),
            DataType::Array { elem, len } => write!(f, "[{elem}; {len}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("pipeline has no stages")]
    EmptyPipeline,
    #[error("pipelines take one or two input streams, got {0}")]
    BadInputCount(usize),
    #[error("stage {stage}: {detail}")]
    StageTypeMismatch { stage: usize, detail: String },
    #[error("stage {stage}: window size must be at least 1")]
    BadWindowSize { stage: usize },
    #[error("stage {stage}: group size must be at least 1")]
    BadGroupSize { stage: usize },
    #[error("stage {stage}: only scalar maps may follow a reduce")]
    StageAfterScalarReduce { stage: usize },
    #[error("stage {stage}: {source}")]
    Kernel { stage: usize, source: TypeError },
}

/// A validated, immutable pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    inputs: Vec<ScalarType>,
    broadcasts: EnvTypes,
    stages: Vec<Stage>,
    types: Vec<DataType>,
    statements: usize,
}

impl Pipeline {
    pub fn build(inputs: Vec<ScalarType>, broadcasts: EnvTypes, stages: Vec<Stage>) -> Result<Self, PipelineError> {
        let statements = inputs.len() + broadcasts.len() + stages.len() + 1;
        Self::validate(inputs, broadcasts, stages, statements)
    }

    fn validate(inputs: Vec<ScalarType>, broadcasts: EnvTypes, stages: Vec<Stage>, statements: usize) -> Result<Self, PipelineError> {
        if stages.is_empty() {
            return Err(PipelineError::EmptyPipeline);
        }
        if !(1..=2).contains(&inputs.len()) {
            return Err(PipelineError::BadInputCount(inputs.len()));
        }
        let mut types = Vec::with_capacity(stages.len());
        let mut current: Vec<ScalarType> = inputs.clone();
        let mut shape = DataType::Stream(inputs[0]);
        for (i, stage) in stages.iter().enumerate() {
            if current.len() > 1 && !matches!(stage, Stage::Map(_)) {
                return Err(PipelineError::StageTypeMismatch {
                    stage: i,
                    detail: "two input streams must be combined by a leading map".into(),
                });
            }
            let kerr = |source| PipelineError::Kernel { stage: i, source };
            shape = match (shape, stage) {
                (DataType::Array { .. }, _) => return Err(PipelineError::StageAfterScalarReduce { stage: i }),
                (DataType::Scalar(_), Stage::Map(f)) => {
                    DataType::Scalar(kernel::type_check(f, &current, &broadcasts).map_err(kerr)?)
                }
                (DataType::Scalar(_), _) => return Err(PipelineError::StageAfterScalarReduce { stage: i }),
                (DataType::Stream(_), Stage::Map(f)) => {
                    DataType::Stream(kernel::type_check(f, &current, &broadcasts).map_err(kerr)?)
                }
                (DataType::Stream(t), Stage::Filter(p)) => {
                    let pt = kernel::type_check(p, &current, &broadcasts).map_err(kerr)?;
                    if pt != ScalarType::Bool {
                        return Err(PipelineError::StageTypeMismatch {
                            stage: i,
                            detail: format!("filter predicate yields {pt}, expected bool"),
                        });
                    }
                    DataType::Stream(t)
                }
                (DataType::Stream(_), Stage::Reduce(r)) => {
                    r.check(&current, &broadcasts, i)?;
                    match r.acc {
                        AccType::Scalar(t) => DataType::Scalar(t),
                        AccType::Array { elem, len } => DataType::Array { elem, len },
                    }
                }
                (DataType::Stream(_), Stage::Window { size, reducer } | Stage::Group { size, reducer }) => {
                    if *size == 0 {
                        return Err(match stage {
                            Stage::Window { .. } => PipelineError::BadWindowSize { stage: i },
                            _ => PipelineError::BadGroupSize { stage: i },
                        });
                    }
                    reducer.check(&current, &broadcasts, i)?;
                    match reducer.acc {
                        AccType::Scalar(t) => DataType::Stream(t),
                        AccType::Array { .. } => {
                            return Err(PipelineError::StageTypeMismatch {
                                stage: i,
                                detail: format!("{} needs a scalar accumulator", stage.name()),
                            })
                        }
                    }
                }
            };
            current = vec![match shape {
                DataType::Stream(t) | DataType::Scalar(t) => t,
                DataType::Array { elem, .. } => elem,
            }];
            types.push(shape);
        }
        Ok(Pipeline { inputs, broadcasts, stages, types, statements })
    }

    pub fn builder() -> PipelineBuilder {
        PipelineBuilder::default()
    }

    pub fn inputs(&self) -> &[ScalarType] {
        &self.inputs
    }

    pub fn broadcasts(&self) -> &EnvTypes {
        &self.broadcasts
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Output shape after stage `i`.
    pub fn stage_type(&self, i: usize) -> DataType {
        self.types[i]
    }

    /// Element types consumed by stage `i`.
    pub fn stage_inputs(&self, i: usize) -> Vec<ScalarType> {
        if i == 0 {
            return self.inputs.clone();
        }
        vec![match self.types[i - 1] {
            DataType::Stream(t) | DataType::Scalar(t) => t,
            DataType::Array { elem, .. } => elem,
        }]
    }

    pub fn output_type(&self) -> DataType {
        *self.types.last().expect("validated pipelines are non-empty")
    }

    /// Number of builder statements used to define the pipeline.
    pub fn statements(&self) -> usize {
        self.statements
    }
}

/// Fluent construction; each call counts as one statement.
#[derive(Debug, Default, Clone)]
pub struct PipelineBuilder {
    inputs: Vec<ScalarType>,
    broadcasts: EnvTypes,
    stages: Vec<Stage>,
    statements: usize,
}

impl PipelineBuilder {
    pub fn input(mut self, ty: ScalarType) -> Self {
        self.inputs.push(ty);
        self.statements += 1;
        self
    }

    pub fn broadcast(mut self, id: BufferId, ty: ScalarType) -> Self {
        self.broadcasts.insert(id, ty);
        self.statements += 1;
        self
    }

    pub fn stage(mut self, stage: Stage) -> Self {
        self.stages.push(stage);
        self.statements += 1;
        self
    }

    pub fn map(self, f: Expr) -> Self {
        self.stage(Stage::Map(f))
    }

    pub fn filter(self, predicate: Expr) -> Self {
        self.stage(Stage::Filter(predicate))
    }

    pub fn reduce(self, reducer: Reducer) -> Self {
        self.stage(Stage::Reduce(reducer))
    }

    pub fn window(self, size: usize, reducer: Reducer) -> Self {
        self.stage(Stage::Window { size, reducer })
    }

    pub fn group(self, size: usize, reducer: Reducer) -> Self {
        self.stage(Stage::Group { size, reducer })
    }

    pub fn build(self) -> Result<Pipeline, PipelineError> {
        Pipeline::validate(self.inputs, self.broadcasts, self.stages, self.statements + 1)
    }
}

/// Final value of a pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Stream(Vec<ScalarValue>),
    Scalar(ScalarValue),
    Array(Vec<ScalarValue>),
}

impl Output {
    pub fn values(&self) -> &[ScalarValue] {
        match self {
            Output::Stream(v) | Output::Array(v) => v,
            Output::Scalar(v) => std::slice::from_ref(v),
        }
    }

    pub fn bit_eq(&self, other: &Output) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
            && self.values().len() == other.values().len()
            && self.values().iter().zip(other.values()).all(|(a, b)| a.bit_eq(b))
    }

    /// Integers exactly, floats within `rel_tol` relative error.
    pub fn approx_eq(&self, other: &Output, rel_tol: f64) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
            && self.values().len() == other.values().len()
            && self.values().iter().zip(other.values()).all(|(a, b)| match (a, b) {
                (ScalarValue::Float64(x), ScalarValue::Float64(y)) => {
                    x.to_bits() == y.to_bits() || (x - y).abs() <= rel_tol * x.abs().max(y.abs())
                }
                _ => a.bit_eq(b),
            })
    }
}

/// Values flowing between stages during execution.
#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    /// One column per input slot (two only before a zip map) plus the index of
    /// every element.
    Stream { columns: Vec<Vec<ScalarValue>>, indices: Vec<u64> },
    Acc(AccValue),
}

impl Data {
    /// A stream indexed by position.
    pub fn dense(columns: Vec<Vec<ScalarValue>>) -> Self {
        let n = columns.first().map_or(0, Vec::len) as u64;
        Data::Stream { columns, indices: (0..n).collect() }
    }

    pub fn into_output(self) -> Output {
        match self {
            Data::Stream { mut columns, .. } => Output::Stream(columns.swap_remove(0)),
            Data::Acc(AccValue::Scalar(v)) => Output::Scalar(v),
            Data::Acc(AccValue::Array(v)) => Output::Array(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("expected {expected} input streams, got {found}")]
    InputCount { expected: usize, found: usize },
    #[error("input streams have different lengths ({0} vs {1})")]
    InputLengthMismatch(usize, usize),
    #[error("input stream {stream} element {element} is {found}, declared {declared}")]
    InputTypeMismatch { stream: usize, element: usize, found: ScalarType, declared: ScalarType },
    #[error("broadcast buffer {0} is missing or has the wrong element type")]
    MissingBuffer(BufferId),
    #[error("stage {stage} failed: {source}")]
    Kernel { stage: usize, source: EvalError },
}

/// Checks stream count, lengths, element types and broadcast buffers.
pub fn validate_inputs(p: &Pipeline, inputs: &[Vec<ScalarValue>], env: &KernelEnv) -> Result<usize, ExecError> {
    if inputs.len() != p.inputs().len() {
        return Err(ExecError::InputCount { expected: p.inputs().len(), found: inputs.len() });
    }
    let n = inputs[0].len();
    for s in inputs {
        if s.len() != n {
            return Err(ExecError::InputLengthMismatch(n, s.len()));
        }
    }
    for (stream, (col, declared)) in inputs.iter().zip(p.inputs()).enumerate() {
        if let Some(element) = col.iter().position(|v| v.ty() != *declared) {
            return Err(ExecError::InputTypeMismatch { stream, element, found: col[element].ty(), declared: *declared });
        }
    }
    for (id, ty) in p.broadcasts() {
        match env.get(*id) {
            Some(b) if b.ty == *ty && b.data.iter().all(|v| v.ty() == *ty) => {}
            _ => return Err(ExecError::MissingBuffer(*id)),
        }
    }
    Ok(n)
}

/// Sequential definitional executor.
pub fn reference_execute(p: &Pipeline, inputs: &[Vec<ScalarValue>], env: &KernelEnv) -> Result<Output, ExecError> {
    validate_inputs(p, inputs, env)?;
    let data = Data::dense(inputs.to_vec());
    execute_stages(p, 0..p.stages().len(), data, env).map(Data::into_output)
}

/// Runs a contiguous range of `p`'s stages on already-materialized data.
pub fn execute_stages(
    p: &Pipeline,
    range: std::ops::Range<usize>,
    mut data: Data,
    env: &KernelEnv,
) -> Result<Data, ExecError> {
    for i in range {
        data = execute_stage(&p.stages()[i], i, data, env)?;
    }
    Ok(data)
}

fn execute_stage(stage: &Stage, i: usize, data: Data, env: &KernelEnv) -> Result<Data, ExecError> {
    let kerr = |source| ExecError::Kernel { stage: i, source };
    let (columns, indices) = match data {
        Data::Acc(AccValue::Scalar(v)) => {
            // Only maps follow a scalar reduce.
            return match stage {
                Stage::Map(f) => Ok(Data::Acc(AccValue::Scalar(kernel::eval(f, &[v], 0, env).map_err(kerr)?))),
                _ => unreachable!("validated pipeline"),
            };
        }
        Data::Acc(acc) => return Ok(Data::Acc(acc)),
        Data::Stream { columns, indices } => (columns, indices),
    };
    let n = indices.len();
    let width = columns.len();
    let element = |k: usize| {
        let mut row = [ScalarValue::Bool(false); 2];
        for (slot, col) in row.iter_mut().zip(&columns) {
            *slot = col[k];
        }
        row
    };
    Ok(match stage {
        Stage::Map(f) => {
            let mut out = Vec::with_capacity(n);
            for (k, &idx) in indices.iter().enumerate() {
                out.push(kernel::eval(f, &element(k)[..width], idx, env).map_err(kerr)?);
            }
            Data::Stream { columns: vec![out], indices }
        }
        Stage::Filter(pred) => {
            let (mut vals, mut idxs) = (Vec::new(), Vec::new());
            for (k, &idx) in indices.iter().enumerate() {
                let x = element(k);
                if kernel::eval(pred, &x[..width], idx, env).map_err(kerr)? == ScalarValue::Bool(true) {
                    vals.push(x[0]);
                    idxs.push(idx);
                }
            }
            Data::Stream { columns: vec![vals], indices: idxs }
        }
        Stage::Reduce(r) => {
            let mut acc = r.identity_value();
            for (k, &idx) in indices.iter().enumerate() {
                r.step(&mut acc, &element(k)[..width], idx, env).map_err(kerr)?;
            }
            Data::Acc(acc)
        }
        Stage::Window { size, reducer } => {
            let outputs = (n + 1).saturating_sub(*size);
            let mut out = Vec::with_capacity(outputs);
            for j in 0..outputs {
                let mut acc = reducer.identity_value();
                for (k, &idx) in indices.iter().enumerate().skip(j).take(*size) {
                    reducer.step(&mut acc, &element(k)[..width], idx, env).map_err(kerr)?;
                }
                out.push(acc.slots()[0]);
            }
            Data::dense(vec![out])
        }
        Stage::Group { size, reducer } => {
            let mut out = Vec::with_capacity(n.div_ceil(*size));
            for start in (0..n).step_by(*size) {
                let mut acc = reducer.identity_value();
                for (k, &idx) in indices.iter().enumerate().skip(start).take(*size) {
                    reducer.step(&mut acc, &element(k)[..width], idx, env).map_err(kerr)?;
                }
                out.push(acc.slots()[0]);
            }
            Data::dense(vec![out])
        }
    })
}

/// Type lookup helper for tests and workload code.
pub fn env_types(pairs: &[(BufferId, ScalarType)]) -> EnvTypes {
    pairs.iter().copied().collect::<BTreeMap<_, _>>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ints(v: &[i32]) -> Vec<ScalarValue> {
        v.iter().map(|&x| ScalarValue::Int32(x)).collect()
    }

    fn run(p: &Pipeline, x: &[i32]) -> Output {
        reference_execute(p, &[ints(x)], &KernelEnv::new()).unwrap()
    }

    #[test]
    fn build_map_then_reduce() {
        let p = Pipeline::builder()
            .input(ScalarType::Int32)
            .map(Expr::input(0) * Expr::i32(2))
            .reduce(Reducer::sum(ScalarType::Int32))
            .build()
            .unwrap();
        assert_eq!(p.output_type(), DataType::Scalar(ScalarType::Int32));
        assert_eq!(p.statements(), 4);
    }

    #[test]
    fn build_errors() {
        assert_eq!(
            Pipeline::build(vec![ScalarType::Int32], EnvTypes::new(), vec![]),
            Err(PipelineError::EmptyPipeline)
        );
        let r = Pipeline::builder()
            .input(ScalarType::Int32)
            .reduce(Reducer::sum(ScalarType::Int32))
            .filter(Expr::bool(true))
            .build();
        assert_eq!(r, Err(PipelineError::StageAfterScalarReduce { stage: 1 }));
        let w = Pipeline::builder().input(ScalarType::Int32).window(0, Reducer::sum(ScalarType::Int32)).build();
        assert_eq!(w, Err(PipelineError::BadWindowSize { stage: 0 }));
        let g = Pipeline::builder().input(ScalarType::Int32).group(0, Reducer::sum(ScalarType::Int32)).build();
        assert_eq!(g, Err(PipelineError::BadGroupSize { stage: 0 }));
        let f = Pipeline::builder().input(ScalarType::Int32).filter(Expr::input(0)).build();
        assert!(matches!(f, Err(PipelineError::StageTypeMismatch { stage: 0, .. })));
        let m = Pipeline::builder().input(ScalarType::Int32).map(Expr::input(1)).build();
        assert!(matches!(m, Err(PipelineError::Kernel { stage: 0, .. })));
        let z = Pipeline::builder()
            .input(ScalarType::Int32)
            .input(ScalarType::Int32)
            .filter(Expr::bool(true))
            .build();
        assert!(matches!(z, Err(PipelineError::StageTypeMismatch { stage: 0, .. })));
        let h = Pipeline::builder().input(ScalarType::Int32).window(2, Reducer::histogram(4)).build();
        assert!(matches!(h, Err(PipelineError::StageTypeMismatch { .. })));
        let after_array = Pipeline::builder()
            .input(ScalarType::Int64)
            .reduce(Reducer::histogram(4))
            .map(Expr::input(0))
            .build();
        assert_eq!(after_array, Err(PipelineError::StageAfterScalarReduce { stage: 1 }));
        let bad_sum = Pipeline::builder().input(ScalarType::Int32).reduce(Reducer::sum(ScalarType::Int64)).build();
        assert!(bad_sum.is_err());
    }

    #[test]
    fn output_types() {
        let m = Pipeline::builder().input(ScalarType::Int32).map(Expr::input(0)).build().unwrap();
        assert_eq!(m.output_type(), DataType::Stream(ScalarType::Int32));
        let h = Pipeline::builder().input(ScalarType::Int64).reduce(Reducer::histogram(256)).build().unwrap();
        assert_eq!(h.output_type(), DataType::Array { elem: ScalarType::Int64, len: 256 });
        let f = Pipeline::builder().input(ScalarType::Int32).filter(Expr::bool(true)).build().unwrap();
        assert_eq!(f.output_type(), DataType::Stream(ScalarType::Int32));
    }

    #[test]
    fn reference_examples() {
        let map = Pipeline::builder().input(ScalarType::Int32).map(Expr::input(0) + Expr::i32(10)).build().unwrap();
        assert_eq!(run(&map, &[1, 2, 3]), Output::Stream(ints(&[11, 12, 13])));

        let v = BufferId(0);
        let dot = Pipeline::builder()
            .input(ScalarType::Int32)
            .broadcast(v, ScalarType::Int32)
            .map(Expr::input(0) * Expr::load(v, Expr::gidx()))
            .reduce(Reducer::sum(ScalarType::Int32))
            .build()
            .unwrap();
        let env = KernelEnv::new().with(v, ScalarType::Int32, ints(&[4, 5, 6]));
        assert_eq!(reference_execute(&dot, &[ints(&[1, 2, 3])], &env), Ok(Output::Scalar(ScalarValue::Int32(32))));

        let win = Pipeline::builder().input(ScalarType::Int32).window(3, Reducer::sum(ScalarType::Int32)).build().unwrap();
        assert_eq!(run(&win, &[1, 2, 3, 4]), Output::Stream(ints(&[6, 9])));
        let grp = Pipeline::builder().input(ScalarType::Int32).group(2, Reducer::sum(ScalarType::Int32)).build().unwrap();
        assert_eq!(run(&grp, &[1, 2, 3, 4, 5]), Output::Stream(ints(&[3, 7, 5])));
    }

    #[test]
    fn filter_keeps_original_index() {
        let p = Pipeline::builder()
            .input(ScalarType::Int32)
            .filter((Expr::input(0) % Expr::i32(2)).eq_(Expr::i32(0)))
            .map(Expr::gidx().narrow())
            .build()
            .unwrap();
        assert_eq!(run(&p, &[1, 2, 3, 4, 6]), Output::Stream(ints(&[1, 3, 4])));
    }

    #[test]
    fn zip_map_and_post_reduce_map() {
        let p = Pipeline::builder()
            .input(ScalarType::Int32)
            .input(ScalarType::Int32)
            .map(Expr::input(0) + Expr::input(1))
            .reduce(Reducer::sum_into_i64())
            .map(Expr::input(0) + Expr::i64(1))
            .build()
            .unwrap();
        let out = reference_execute(&p, &[ints(&[1, 2]), ints(&[3, 4])], &KernelEnv::new()).unwrap();
        assert_eq!(out, Output::Scalar(ScalarValue::Int64(11)));
    }

    #[test]
    fn input_errors() {
        let p = Pipeline::builder()
            .input(ScalarType::Int32)
            .input(ScalarType::Int32)
            .map(Expr::input(0) + Expr::input(1))
            .build()
            .unwrap();
        let env = KernelEnv::new();
        assert_eq!(reference_execute(&p, &[ints(&[1]), ints(&[])], &env), Err(ExecError::InputLengthMismatch(1, 0)));
        let div = Pipeline::builder().input(ScalarType::Int32).map(Expr::i32(1) / Expr::input(0)).build().unwrap();
        assert_eq!(
            reference_execute(&div, &[ints(&[1, 0])], &env),
            Err(ExecError::Kernel { stage: 0, source: EvalError::RuntimeDivisionByZero { index: 1 } })
        );
    }

    #[test]
    fn empty_reduce_is_identity() {
        let p = Pipeline::builder().input(ScalarType::Int32).reduce(Reducer::sum_into_i64()).build().unwrap();
        assert_eq!(run(&p, &[]), Output::Scalar(ScalarValue::Int64(0)));
    }

    fn is_subsequence(needle: &[ScalarValue], hay: &[ScalarValue]) -> bool {
        let mut it = hay.iter();
        needle.iter().all(|x| it.any(|y| y == x))
    }

    proptest! {
        #[test]
        fn length_laws(xs in proptest::collection::vec(-50i32..50, 0..400), w in 1usize..9, g in 1usize..9) {
            let n = xs.len();
            let map = Pipeline::builder().input(ScalarType::Int32).map(Expr::input(0) * Expr::i32(3)).build().unwrap();
            prop_assert_eq!(run(&map, &xs).values().len(), n);
            let filt = Pipeline::builder().input(ScalarType::Int32).filter(Expr::input(0).gt(Expr::i32(0))).build().unwrap();
            let kept = run(&filt, &xs);
            prop_assert!(is_subsequence(kept.values(), &ints(&xs)));
            let win = Pipeline::builder().input(ScalarType::Int32).window(w, Reducer::sum(ScalarType::Int32)).build().unwrap();
            prop_assert_eq!(run(&win, &xs).values().len(), (n + 1).saturating_sub(w));
            let grp = Pipeline::builder().input(ScalarType::Int32).group(g, Reducer::sum(ScalarType::Int32)).build().unwrap();
            prop_assert_eq!(run(&grp, &xs).values().len(), n.div_ceil(g));
        }

        #[test]
        fn window_of_one_is_a_pointwise_fold(xs in proptest::collection::vec(any::<i32>(), 0..200)) {
            let r = Reducer::scalar(ScalarType::Int32, ScalarValue::Int32(7), Expr::input(0) * Expr::input(1), Expr::input(0) * Expr::input(1));
            let win = Pipeline::builder().input(ScalarType::Int32).window(1, r).build().unwrap();
            let map = Pipeline::builder().input(ScalarType::Int32).map(Expr::i32(7) * Expr::input(0)).build().unwrap();
            prop_assert_eq!(run(&win, &xs), run(&map, &xs));
        }

        #[test]
        fn reduce_matches_any_fold_order(xs in proptest::collection::vec(any::<i32>(), 0..200), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let r = Reducer::sum_into_i64();
            let p = Pipeline::builder().input(ScalarType::Int32).reduce(r.clone()).build().unwrap();
            let expected = run(&p, &xs);
            let mut order: Vec<usize> = (0..xs.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let env = KernelEnv::new();
            // Fold singleton accumulators in shuffled order with combine.
            let mut acc = r.identity_value();
            for k in order {
                let mut one = r.identity_value();
                r.step(&mut one, &[ScalarValue::Int32(xs[k])], k as u64, &env).unwrap();
                acc = r.combine(&acc, &one, &env).unwrap();
            }
            prop_assert_eq!(Output::Scalar(acc.slots()[0]), expected);
        }
    }
}
