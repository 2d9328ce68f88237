//! Kernel expressions: the loop-free scalar language evaluated inside every
//! pattern stage.
//!
//! A kernel sees up to a handful of input slots (`in0`, `in1`, ...), the
//! global index of the element being processed (`gidx`, always `Int64`) and a
//! set of read-only broadcast buffers. The same tree is executed by the
//! sequential reference executor and by the simulated DPUs, so evaluation is
//! fully deterministic: integer arithmetic wraps (two's complement) and
//! division by zero is an error for every numeric type.
//!
//! # Text rendering
//!
//! `render` produces a canonical, fully parenthesized form:
//!
//! | node                     | rendering                 |
//! |--------------------------|---------------------------|
//! | `Input(k)`               | `ink`                     |
//! | `GlobalIndex`            | `gidx`                    |
//! | `Const`                  | `1i32`, `-7i64`, `2.5f64`, `true` |
//! | `BroadcastLoad(b, i)`    | `bufB[i]`                 |
//! | unary `neg` / `not`      | `(-a)` / `(!a)`           |
//! | `int-to-float`           | `itof(a)`                 |
//! | `float-to-int`           | `ftoi(a)`                 |
//! | `widen` / `narrow`       | `i64(a)` / `i32(a)`       |
//! | infix binary             | `(a + b)` with `+ - * / % == != < <= > >= && ‖`, `‖` spelled `\|\|` |
//! | `min` / `max`            | `min(a, b)` / `max(a, b)` |
//! | `Select(c, t, e)`        | `(c ? t : e)`             |
//!
//! Floats use Rust's shortest round-trip formatting, so distinct constants
//! never render the same.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Element types understood by kernels and streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScalarType {
    Int32,
    Int64,
    Float64,
    Bool,
}

impl ScalarType {
    /// Size of one element in MRAM/WRAM.
    pub fn width(self) -> u64 {
        match self {
            ScalarType::Int32 => 4,
            ScalarType::Int64 | ScalarType::Float64 => 8,
            ScalarType::Bool => 1,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, ScalarType::Int32 | ScalarType::Int64)
    }

    pub fn is_numeric(self) -> bool {
        self != ScalarType::Bool
    }

    pub fn suffix(self) -> &'static str {
        match self {
            ScalarType::Int32 => "i32",
            ScalarType::Int64 => "i64",
            ScalarType::Float64 => "f64",
            ScalarType::Bool => "bool",
        }
    }
}

impl fmt::Display for ScalarType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.suffix())
    }
}

/// A tagged scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScalarValue {
    Int32(i32),
    Int64(i64),
    Float64(f64),
    Bool(bool),
}

impl ScalarValue {
    pub fn ty(&self) -> ScalarType {
        match self {
            ScalarValue::Int32(_) => ScalarType::Int32,
            ScalarValue::Int64(_) => ScalarType::Int64,
            ScalarValue::Float64(_) => ScalarType::Float64,
            ScalarValue::Bool(_) => ScalarType::Bool,
        }
    }

    pub fn zero(ty: ScalarType) -> Self {
        match ty {
            ScalarType::Int32 => ScalarValue::Int32(0),
            ScalarType::Int64 => ScalarValue::Int64(0),
            ScalarType::Float64 => ScalarValue::Float64(0.0),
            ScalarType::Bool => ScalarValue::Bool(false),
        }
    }

    /// Integer payload widened to `i64`; `None` for floats and booleans.
    pub fn as_i64(&self) -> Option<i64> {
        match *self {
            ScalarValue::Int32(v) => Some(v as i64),
            ScalarValue::Int64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match *self {
            ScalarValue::Bool(b) => Some(b),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            ScalarValue::Int32(v) => v == 0,
            ScalarValue::Int64(v) => v == 0,
            ScalarValue::Float64(v) => v == 0.0,
            ScalarValue::Bool(_) => false,
        }
    }

    /// Bitwise equality: floats compare by bit pattern, so `NaN == NaN`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ScalarValue::Float64(a), ScalarValue::Float64(b)) => a.to_bits() == b.to_bits(),
            _ => self == other,
        }
    }

    /// Little-endian encoding, `ty().width()` bytes.
    pub fn write_le(&self, out: &mut [u8]) {
        match *self {
            ScalarValue::Int32(v) => out[..4].copy_from_slice(&v.to_le_bytes()),
            ScalarValue::Int64(v) => out[..8].copy_from_slice(&v.to_le_bytes()),
            ScalarValue::Float64(v) => out[..8].copy_from_slice(&v.to_bits().to_le_bytes()),
            ScalarValue::Bool(v) => out[0] = v as u8,
        }
    }

    pub fn read_le(ty: ScalarType, bytes: &[u8]) -> Self {
        match ty {
            ScalarType::Int32 => ScalarValue::Int32(i32::from_le_bytes(bytes[..4].try_into().unwrap())),
            ScalarType::Int64 => ScalarValue::Int64(i64::from_le_bytes(bytes[..8].try_into().unwrap())),
            ScalarType::Float64 => {
                ScalarValue::Float64(f64::from_bits(u64::from_le_bytes(bytes[..8].try_into().unwrap())))
            }
            ScalarType::Bool => ScalarValue::Bool(bytes[0] != 0),
        }
    }
}

impl fmt::Display for ScalarValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ScalarValue::Int32(v) => write!(f, "{v}i32"),
            ScalarValue::Int64(v) => write!(f, "{v}i64"),
            ScalarValue::Float64(v) => write!(f, "{v:?}f64"),
            ScalarValue::Bool(v) => write!(f, "{v}"),
        }
    }
}

/// Identifier of a broadcast buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BufferId(pub u16);

impl fmt::Display for BufferId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "buf{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnaryOp {
    Neg,
    Not,
    /// `Int32`/`Int64` to `Float64`.
    IntToFloat,
    /// `Float64` to `Int64`, truncating toward zero and saturating.
    FloatToInt,
    /// `Int32` to `Int64`, sign-extending. `Int64` passes through.
    Widen,
    /// `Int64` to `Int32`, wrapping. `Int32` passes through.
    Narrow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Min,
    Max,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

impl BinaryOp {
    fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Mod => "%",
            BinaryOp::Min => "min",
            BinaryOp::Max => "max",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
            BinaryOp::And => "&&",
            BinaryOp::Or => "||",
        }
    }

    fn is_arithmetic(self) -> bool {
        matches!(
            self,
            BinaryOp::Add | BinaryOp::Sub | BinaryOp::Mul | BinaryOp::Div | BinaryOp::Mod | BinaryOp::Min | BinaryOp::Max
        )
    }
}

/// A kernel expression tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Input(usize),
    GlobalIndex,
    Const(ScalarValue),
    BroadcastLoad { buffer: BufferId, index: Box<Expr> },
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Select(Box<Expr>, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn input(slot: usize) -> Self {
        Expr::Input(slot)
    }

    pub fn gidx() -> Self {
        Expr::GlobalIndex
    }

    pub fn i32(v: i32) -> Self {
        Expr::Const(ScalarValue::Int32(v))
    }

    pub fn i64(v: i64) -> Self {
        Expr::Const(ScalarValue::Int64(v))
    }

    pub fn f64(v: f64) -> Self {
        Expr::Const(ScalarValue::Float64(v))
    }

    pub fn bool(v: bool) -> Self {
        Expr::Const(ScalarValue::Bool(v))
    }

    pub fn load(buffer: BufferId, index: Expr) -> Self {
        Expr::BroadcastLoad { buffer, index: Box::new(index) }
    }

    pub fn unary(op: UnaryOp, a: Expr) -> Self {
        Expr::Unary(op, Box::new(a))
    }

    pub fn binary(op: BinaryOp, a: Expr, b: Expr) -> Self {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn select(cond: Expr, then: Expr, otherwise: Expr) -> Self {
        Expr::Select(Box::new(cond), Box::new(then), Box::new(otherwise))
    }

    pub fn min(self, other: Expr) -> Self {
        Expr::binary(BinaryOp::Min, self, other)
    }

    pub fn max(self, other: Expr) -> Self {
        Expr::binary(BinaryOp::Max, self, other)
    }

    pub fn eq_(self, other: Expr) -> Self {
        Expr::binary(BinaryOp::Eq, self, other)
    }

    pub fn ne_(self, other: Expr) -> Self {
        Expr::binary(BinaryOp::Ne, self, other)
    }

    pub fn lt(self, other: Expr) -> Self {
        Expr::binary(BinaryOp::Lt, self, other)
    }

    pub fn le(self, other: Expr) -> Self {
        Expr::binary(BinaryOp::Le, self, other)
    }

    pub fn gt(self, other: Expr) -> Self {
        Expr::binary(BinaryOp::Gt, self, other)
    }

    pub fn ge(self, other: Expr) -> Self {
        Expr::binary(BinaryOp::Ge, self, other)
    }

    pub fn and(self, other: Expr) -> Self {
        Expr::binary(BinaryOp::And, self, other)
    }

    pub fn or(self, other: Expr) -> Self {
        Expr::binary(BinaryOp::Or, self, other)
    }

    pub fn widen(self) -> Self {
        Expr::unary(UnaryOp::Widen, self)
    }

    pub fn narrow(self) -> Self {
        Expr::unary(UnaryOp::Narrow, self)
    }

    pub fn to_float(self) -> Self {
        Expr::unary(UnaryOp::IntToFloat, self)
    }

    pub fn to_int(self) -> Self {
        Expr::unary(UnaryOp::FloatToInt, self)
    }

    fn children(&self) -> impl Iterator<Item = &Expr> {
        let (a, b, c): (Option<&Expr>, Option<&Expr>, Option<&Expr>) = match self {
            Expr::Input(_) | Expr::GlobalIndex | Expr::Const(_) => (None, None, None),
            Expr::BroadcastLoad { index, .. } => (Some(index), None, None),
            Expr::Unary(_, a) => (Some(a), None, None),
            Expr::Binary(_, a, b) => (Some(a), Some(b), None),
            Expr::Select(c, t, e) => (Some(c), Some(t), Some(e)),
        };
        a.into_iter().chain(b).chain(c)
    }

    /// Total number of nodes, leaves included.
    pub fn node_count(&self) -> usize {
        1 + self.children().map(Expr::node_count).sum::<usize>()
    }

    pub fn uses_global_index(&self) -> bool {
        matches!(self, Expr::GlobalIndex) || self.children().any(Expr::uses_global_index)
    }

    /// Highest input slot referenced, if any.
    pub fn max_input_slot(&self) -> Option<usize> {
        let own = match self {
            Expr::Input(k) => Some(*k),
            _ => None,
        };
        self.children().filter_map(Expr::max_input_slot).chain(own).max()
    }
}

macro_rules! impl_binary_operator {
    ($trait:ident, $method:ident, $op:expr) => {
        impl std::ops::$trait for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::binary($op, self, rhs)
            }
        }
    };
}

impl_binary_operator!(Add, add, BinaryOp::Add);
impl_binary_operator!(Sub, sub, BinaryOp::Sub);
impl_binary_operator!(Mul, mul, BinaryOp::Mul);
impl_binary_operator!(Div, div, BinaryOp::Div);
impl_binary_operator!(Rem, rem, BinaryOp::Mod);

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::unary(UnaryOp::Neg, self)
    }
}

impl std::ops::Not for Expr {
    type Output = Expr;
    fn not(self) -> Expr {
        Expr::unary(UnaryOp::Not, self)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Input(k) => write!(f, "in{k}"),
            Expr::GlobalIndex => f.write_str("gidx"),
            Expr::Const(v) => write!(f, "{v}"),
            Expr::BroadcastLoad { buffer, index } => write!(f, "{buffer}[{index}]"),
            Expr::Unary(op, a) => match op {
                UnaryOp::Neg => write!(f, "(-{a})"),
                UnaryOp::Not => write!(f, "(!{a})"),
                UnaryOp::IntToFloat => write!(f, "itof({a})"),
                UnaryOp::FloatToInt => write!(f, "ftoi({a})"),
                UnaryOp::Widen => write!(f, "i64({a})"),
                UnaryOp::Narrow => write!(f, "i32({a})"),
            },
            Expr::Binary(op @ (BinaryOp::Min | BinaryOp::Max), a, b) => write!(f, "{}({a}, {b})", op.symbol()),
            Expr::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Select(c, t, e) => write!(f, "({c} ? {t} : {e})"),
        }
    }
}

/// Canonical text of a kernel.
pub fn render(expr: &Expr) -> String {
    expr.to_string()
}

/// Number of operator nodes (unary, binary, select, broadcast load).
pub fn op_count(expr: &Expr) -> u64 {
    let own = match expr {
        Expr::Input(_) | Expr::GlobalIndex | Expr::Const(_) => 0,
        _ => 1,
    };
    own + expr.children().map(op_count).sum::<u64>()
}

/// Element types of the broadcast buffers visible to a kernel.
pub type EnvTypes = BTreeMap<BufferId, ScalarType>;

#[derive(Debug, Clone)]
pub struct Buffer {
    pub ty: ScalarType,
    pub data: Arc<[ScalarValue]>,
}

/// Read-only broadcast buffers.
#[derive(Debug, Clone, Default)]
pub struct KernelEnv {
    buffers: BTreeMap<BufferId, Buffer>,
}

impl KernelEnv {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a buffer. Values are expected to have type `ty`; `pipeline`
    /// validation rejects environments where they don't.
    pub fn with(mut self, id: BufferId, ty: ScalarType, data: Vec<ScalarValue>) -> Self {
        self.buffers.insert(id, Buffer { ty, data: data.into() });
        self
    }

    pub fn get(&self, id: BufferId) -> Option<&Buffer> {
        self.buffers.get(&id)
    }

    pub fn types(&self) -> EnvTypes {
        self.buffers.iter().map(|(id, b)| (*id, b.ty)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (BufferId, &Buffer)> {
        self.buffers.iter().map(|(id, b)| (*id, b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TypeError {
    #[error("input slot {slot} is not declared ({available} available)")]
    UnknownInputSlot { slot: usize, available: usize },
    #[error("broadcast buffer {0} is not declared")]
    UnknownBuffer(BufferId),
    #[error("type mismatch in {context}: expected {expected}, found {found}")]
    TypeMismatch { context: String, expected: String, found: String },
    #[error("division or modulo by constant zero")]
    ConstDivisionByZero,
}

fn mismatch(context: impl Into<String>, expected: impl Into<String>, found: ScalarType) -> TypeError {
    TypeError::TypeMismatch { context: context.into(), expected: expected.into(), found: found.to_string() }
}

/// Checks `expr` and returns its result type.
pub fn type_check(expr: &Expr, input_types: &[ScalarType], env_types: &EnvTypes) -> Result<ScalarType, TypeError> {
    check_node(expr, input_types, env_types, &mut None)
}

/// Like [`type_check`], but returns the type of every node in pre-order.
pub fn annotate(expr: &Expr, input_types: &[ScalarType], env_types: &EnvTypes) -> Result<Vec<ScalarType>, TypeError> {
    let mut out = Some(Vec::with_capacity(expr.node_count()));
    check_node(expr, input_types, env_types, &mut out)?;
    Ok(out.unwrap_or_default())
}

fn check_node(
    expr: &Expr,
    inputs: &[ScalarType],
    env: &EnvTypes,
    notes: &mut Option<Vec<ScalarType>>,
) -> Result<ScalarType, TypeError> {
    // Reserve the pre-order slot before visiting children.
    let slot = notes.as_mut().map(|v| {
        v.push(ScalarType::Bool);
        v.len() - 1
    });
    let ty = match expr {
        Expr::Input(k) => *inputs
            .get(*k)
            .ok_or(TypeError::UnknownInputSlot { slot: *k, available: inputs.len() })?,
        Expr::GlobalIndex => ScalarType::Int64,
        Expr::Const(v) => v.ty(),
        Expr::BroadcastLoad { buffer, index } => {
            let elem = *env.get(buffer).ok_or(TypeError::UnknownBuffer(*buffer))?;
            let it = check_node(index, inputs, env, notes)?;
            if !it.is_integer() {
                return Err(mismatch("broadcast index", "integer", it));
            }
            elem
        }
        Expr::Unary(op, a) => {
            let at = check_node(a, inputs, env, notes)?;
            match op {
                UnaryOp::Neg if at.is_numeric() => at,
                UnaryOp::Neg => return Err(mismatch("neg", "numeric", at)),
                UnaryOp::Not if at == ScalarType::Bool => at,
                UnaryOp::Not => return Err(mismatch("not", "bool", at)),
                UnaryOp::IntToFloat if at.is_integer() => ScalarType::Float64,
                UnaryOp::IntToFloat => return Err(mismatch("itof", "integer", at)),
                UnaryOp::FloatToInt if at == ScalarType::Float64 => ScalarType::Int64,
                UnaryOp::FloatToInt => return Err(mismatch("ftoi", "f64", at)),
                UnaryOp::Widen if at.is_integer() => ScalarType::Int64,
                UnaryOp::Widen => return Err(mismatch("i64", "integer", at)),
                UnaryOp::Narrow if at.is_integer() => ScalarType::Int32,
                UnaryOp::Narrow => return Err(mismatch("i32", "integer", at)),
            }
        }
        Expr::Binary(op, a, b) => {
            let at = check_node(a, inputs, env, notes)?;
            let bt = check_node(b, inputs, env, notes)?;
            if at != bt {
                return Err(mismatch(format!("operands of {}", op.symbol()), at.to_string(), bt));
            }
            if matches!(op, BinaryOp::Div | BinaryOp::Mod) {
                if let Expr::Const(c) = b.as_ref() {
                    if c.is_zero() {
                        return Err(TypeError::ConstDivisionByZero);
                    }
                }
            }
            match op {
                _ if op.is_arithmetic() => {
                    if !at.is_numeric() {
                        return Err(mismatch(op.symbol(), "numeric", at));
                    }
                    at
                }
                BinaryOp::Eq | BinaryOp::Ne => ScalarType::Bool,
                BinaryOp::And | BinaryOp::Or => {
                    if at != ScalarType::Bool {
                        return Err(mismatch(op.symbol(), "bool", at));
                    }
                    ScalarType::Bool
                }
                _ => {
                    if !at.is_numeric() {
                        return Err(mismatch(op.symbol(), "numeric", at));
                    }
                    ScalarType::Bool
                }
            }
        }
        Expr::Select(c, t, e) => {
            let ct = check_node(c, inputs, env, notes)?;
            if ct != ScalarType::Bool {
                return Err(mismatch("select condition", "bool", ct));
            }
            let tt = check_node(t, inputs, env, notes)?;
            let et = check_node(e, inputs, env, notes)?;
            if tt != et {
                return Err(mismatch("select branches", tt.to_string(), et));
            }
            tt
        }
    };
    if let (Some(v), Some(i)) = (notes.as_mut(), slot) {
        v[i] = ty;
    }
    Ok(ty)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("division by zero at element {index}")]
    RuntimeDivisionByZero { index: u64 },
    #[error("{buffer}[{offset}] is out of bounds (len {len}) at element {index}")]
    BroadcastIndexOutOfBounds { buffer: BufferId, offset: i64, len: usize, index: u64 },
    #[error("accumulator slot {slot} is out of bounds (len {len}) at element {index}")]
    AccumulatorIndexOutOfBounds { slot: i64, len: usize, index: u64 },
    #[error("kernel was not type checked against these arguments: {0}")]
    IllTyped(String),
}

/// Evaluates a type-checked kernel.
pub fn eval(expr: &Expr, inputs: &[ScalarValue], index: u64, env: &KernelEnv) -> Result<ScalarValue, EvalError> {
    use ScalarValue as V;
    Ok(match expr {
        Expr::Input(k) => *inputs.get(*k).ok_or_else(|| EvalError::IllTyped(format!("missing in{k}")))?,
        Expr::GlobalIndex => V::Int64(index as i64),
        Expr::Const(v) => *v,
        Expr::BroadcastLoad { buffer, index: at } => {
            let buf = env.get(*buffer).ok_or_else(|| EvalError::IllTyped(format!("missing {buffer}")))?;
            let offset = eval(at, inputs, index, env)?
                .as_i64()
                .ok_or_else(|| EvalError::IllTyped("non-integer broadcast index".into()))?;
            if offset < 0 || offset as u64 >= buf.data.len() as u64 {
                return Err(EvalError::BroadcastIndexOutOfBounds { buffer: *buffer, offset, len: buf.data.len(), index });
            }
            buf.data[offset as usize]
        }
        Expr::Unary(op, a) => {
            let a = eval(a, inputs, index, env)?;
            match (op, a) {
                (UnaryOp::Neg, V::Int32(x)) => V::Int32(x.wrapping_neg()),
                (UnaryOp::Neg, V::Int64(x)) => V::Int64(x.wrapping_neg()),
                (UnaryOp::Neg, V::Float64(x)) => V::Float64(-x),
                (UnaryOp::Not, V::Bool(x)) => V::Bool(!x),
                (UnaryOp::IntToFloat, V::Int32(x)) => V::Float64(x as f64),
                (UnaryOp::IntToFloat, V::Int64(x)) => V::Float64(x as f64),
                (UnaryOp::FloatToInt, V::Float64(x)) => V::Int64(x as i64),
                (UnaryOp::Widen, V::Int32(x)) => V::Int64(x as i64),
                (UnaryOp::Widen, V::Int64(x)) => V::Int64(x),
                (UnaryOp::Narrow, V::Int64(x)) => V::Int32(x as i32),
                (UnaryOp::Narrow, V::Int32(x)) => V::Int32(x),
                (op, a) => return Err(EvalError::IllTyped(format!("{op:?} on {}", a.ty()))),
            }
        }
        Expr::Binary(op, a, b) => {
            let a = eval(a, inputs, index, env)?;
            let b = eval(b, inputs, index, env)?;
            apply_binary(*op, a, b, index)?
        }
        Expr::Select(c, t, e) => match eval(c, inputs, index, env)? {
            V::Bool(true) => eval(t, inputs, index, env)?,
            V::Bool(false) => eval(e, inputs, index, env)?,
            other => return Err(EvalError::IllTyped(format!("select on {}", other.ty()))),
        },
    })
}

fn apply_binary(op: BinaryOp, a: ScalarValue, b: ScalarValue, index: u64) -> Result<ScalarValue, EvalError> {
    use ScalarValue as V;
    macro_rules! int_arith {
        ($x:expr, $y:expr, $ctor:path) => {
            match op {
                BinaryOp::Add => $ctor($x.wrapping_add($y)),
                BinaryOp::Sub => $ctor($x.wrapping_sub($y)),
                BinaryOp::Mul => $ctor($x.wrapping_mul($y)),
                BinaryOp::Div if $y == 0 => return Err(EvalError::RuntimeDivisionByZero { index }),
                BinaryOp::Div => $ctor($x.wrapping_div($y)),
                BinaryOp::Mod if $y == 0 => return Err(EvalError::RuntimeDivisionByZero { index }),
                BinaryOp::Mod => $ctor($x.wrapping_rem($y)),
                BinaryOp::Min => $ctor($x.min($y)),
                BinaryOp::Max => $ctor($x.max($y)),
                BinaryOp::Eq => V::Bool($x == $y),
                BinaryOp::Ne => V::Bool($x != $y),
                BinaryOp::Lt => V::Bool($x < $y),
                BinaryOp::Le => V::Bool($x <= $y),
                BinaryOp::Gt => V::Bool($x > $y),
                BinaryOp::Ge => V::Bool($x >= $y),
                BinaryOp::And | BinaryOp::Or => return Err(EvalError::IllTyped(format!("{op:?} on integers"))),
            }
        };
    }
    Ok(match (a, b) {
        (V::Int32(x), V::Int32(y)) => int_arith!(x, y, V::Int32),
        (V::Int64(x), V::Int64(y)) => int_arith!(x, y, V::Int64),
        (V::Float64(x), V::Float64(y)) => match op {
            BinaryOp::Add => V::Float64(x + y),
            BinaryOp::Sub => V::Float64(x - y),
            BinaryOp::Mul => V::Float64(x * y),
            BinaryOp::Div | BinaryOp::Mod if y == 0.0 => return Err(EvalError::RuntimeDivisionByZero { index }),
            BinaryOp::Div => V::Float64(x / y),
            BinaryOp::Mod => V::Float64(x % y),
            BinaryOp::Min => V::Float64(x.min(y)),
            BinaryOp::Max => V::Float64(x.max(y)),
            BinaryOp::Eq => V::Bool(x == y),
            BinaryOp::Ne => V::Bool(x != y),
            BinaryOp::Lt => V::Bool(x < y),
            BinaryOp::Le => V::Bool(x <= y),
            BinaryOp::Gt => V::Bool(x > y),
            BinaryOp::Ge => V::Bool(x >= y),
            BinaryOp::And | BinaryOp::Or => return Err(EvalError::IllTyped(format!("{op:?} on floats"))),
        },
        (V::Bool(x), V::Bool(y)) => match op {
            BinaryOp::And => V::Bool(x && y),
            BinaryOp::Or => V::Bool(x || y),
            BinaryOp::Eq => V::Bool(x == y),
            BinaryOp::Ne => V::Bool(x != y),
            _ => return Err(EvalError::IllTyped(format!("{op:?} on booleans"))),
        },
        (a, b) => return Err(EvalError::IllTyped(format!("{op:?} on {} and {}", a.ty(), b.ty()))),
    })
}
