//! Random well-typed pipelines and inputs for the integration suites.
#![allow(dead_code)]

use pimflow::kernel::{BufferId, Expr, KernelEnv, ScalarType, ScalarValue};
use pimflow::pipeline::{Pipeline, Reducer, Stage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod golden;
pub mod laws;

pub const BUF: BufferId = BufferId(3);
pub const BUF_LEN: usize = 5;

#[derive(Debug, Clone)]
pub struct Case {
    pub pipeline: Pipeline,
    pub inputs: Vec<Vec<ScalarValue>>,
    pub env: KernelEnv,
}

fn konst(ty: ScalarType, v: i64) -> Expr {
    match ty {
        ScalarType::Int32 => Expr::i32(v as i32),
        _ => Expr::i64(v),
    }
}

fn to(ty: ScalarType, e: Expr, from: ScalarType) -> Expr {
    match (from, ty) {
        (a, b) if a == b => e,
        (ScalarType::Int32, ScalarType::Int64) => e.widen(),
        _ => e.narrow(),
    }
}

/// A total integer expression of type `ty` over `in0: cur` (and `in1: cur` when `zip`).
pub fn expr(rng: &mut ChaCha8Rng, ty: ScalarType, cur: ScalarType, zip: bool, depth: u32) -> Expr {
    if depth == 0 || rng.gen_bool(0.3) {
        return match rng.gen_range(0..10) {
            0..=4 => to(ty, Expr::input(0), cur),
            5 if zip => to(ty, Expr::input(1), cur),
            6 => to(ty, Expr::gidx(), ScalarType::Int64),
            7 => to(ty, Expr::load(BUF, Expr::gidx() % Expr::i64(BUF_LEN as i64)), ScalarType::Int32),
            _ => konst(ty, rng.gen_range(-9..=9)),
        };
    }
    let sub = |rng: &mut ChaCha8Rng| expr(rng, ty, cur, zip, depth - 1);
    match rng.gen_range(0..9) {
        0 => sub(rng) + sub(rng),
        1 => sub(rng) - sub(rng),
        2 => sub(rng) * sub(rng),
        3 => sub(rng).min(sub(rng)),
        4 => sub(rng).max(sub(rng)),
        5 => sub(rng) % konst(ty, rng.gen_range(2..=7)),
        6 => sub(rng) / konst(ty, rng.gen_range(1..=5)),
        7 => {
            let c = predicate(rng, cur, zip, depth - 1);
            Expr::select(c, sub(rng), sub(rng))
        }
        _ => -sub(rng),
    }
}

pub fn predicate(rng: &mut ChaCha8Rng, cur: ScalarType, zip: bool, depth: u32) -> Expr {
    let a = expr(rng, cur, cur, zip, depth);
    let b = match rng.gen_range(0..3) {
        0 => konst(cur, rng.gen_range(-5..=5)),
        _ => expr(rng, cur, cur, zip, depth),
    };
    let m = konst(cur, rng.gen_range(2..=4));
    match rng.gen_range(0..6) {
        0 => a.lt(b),
        1 => a.ge(b),
        2 => (a % m).eq_(konst(cur, 0)),
        3 => a.ne_(b),
        4 => a.le(b).or(Expr::gidx().lt(Expr::i64(rng.gen_range(0..50)))),
        _ => a.gt(b).and((Expr::gidx() % Expr::i64(3)).ne_(Expr::i64(1))),
    }
}

/// Scalar `Int64` reducers. `ordered` allows steps that only make sense folded in sequence.
pub fn scalar_reducer(rng: &mut ChaCha8Rng, ordered: bool) -> Reducer {
    let x = Expr::input(1).widen();
    let r = |step: Expr, combine: Expr, id: i64| Reducer::scalar(ScalarType::Int64, ScalarValue::Int64(id), step, combine);
    let sum = Expr::input(0) + Expr::input(1);
    match rng.gen_range(0..if ordered { 6 } else { 5 }) {
        0 => r(Expr::input(0) + x, sum, 0),
        1 => r(Expr::input(0).min(x), Expr::input(0).min(Expr::input(1)), i64::MAX),
        2 => r(Expr::input(0).max(x), Expr::input(0).max(Expr::input(1)), i64::MIN),
        3 => r(Expr::input(0) + x * Expr::gidx(), sum, 0),
        4 => r(Expr::input(0) + (x % Expr::i64(2)).eq_(Expr::i64(0)).then_count(), sum, 0),
        _ => r(Expr::input(0) * Expr::i64(31) + x, sum, 7),
    }
}

trait ThenCount {
    fn then_count(self) -> Expr;
}

impl ThenCount for Expr {
    fn then_count(self) -> Expr {
        Expr::select(self, Expr::i64(1), Expr::i64(0))
    }
}

pub fn histogram_reducer(rng: &mut ChaCha8Rng) -> Reducer {
    let bins = rng.gen_range(1..=40);
    let b = Expr::i64(bins as i64);
    let slot = (Expr::input(0).widen() % b.clone() + b.clone()) % b;
    Reducer::array(ScalarType::Int64, bins, ScalarValue::Int64(0), slot, Expr::input(0) + Expr::i64(1), Expr::input(0) + Expr::input(1))
}

/// A random valid pipeline of at most `max_stages` stages.
pub fn pipeline(rng: &mut ChaCha8Rng, max_stages: usize) -> Pipeline {
    let zip = rng.gen_bool(0.25);
    let elem = *[ScalarType::Int32, ScalarType::Int64].choose(rng).unwrap();
    let inputs = if zip { vec![elem, elem] } else { vec![elem] };
    let mut cur = elem;
    let mut stages = Vec::new();
    let len = rng.gen_range(1..=max_stages);
    let mut reduced = false;
    while stages.len() < len {
        let first_zip = zip && stages.is_empty();
        if reduced {
            // Scalar reduce results take maps only.
            stages.push(Stage::Map(expr(rng, ScalarType::Int64, ScalarType::Int64, false, 2)));
            continue;
        }
        let pick = if first_zip { 0 } else { rng.gen_range(0..12) };
        match pick {
            0..=3 => {
                let ty = *[ScalarType::Int32, ScalarType::Int64].choose(rng).unwrap();
                stages.push(Stage::Map(expr(rng, ty, cur, first_zip, 3)));
                cur = ty;
            }
            4..=6 => stages.push(Stage::Filter(predicate(rng, cur, false, 2))),
            7 | 8 => {
                stages.push(Stage::Window { size: rng.gen_range(1..=6), reducer: scalar_reducer(rng, true) });
                cur = ScalarType::Int64;
            }
            9 | 10 => {
                stages.push(Stage::Group { size: rng.gen_range(1..=9), reducer: scalar_reducer(rng, true) });
                cur = ScalarType::Int64;
            }
            _ => {
                let histogram = rng.gen_bool(0.3);
                stages.push(Stage::Reduce(if histogram { histogram_reducer(rng) } else { scalar_reducer(rng, false) }));
                if histogram {
                    break;
                }
                reduced = true;
            }
        }
    }
    let broadcasts = [(BUF, ScalarType::Int32)].into_iter().collect();
    Pipeline::build(inputs, broadcasts, stages).expect("generator builds valid pipelines")
}

pub fn values(rng: &mut ChaCha8Rng, ty: ScalarType, n: usize) -> Vec<ScalarValue> {
    let narrow = rng.gen_bool(0.5);
    (0..n)
        .map(|_| {
            let v: i64 = if narrow { rng.gen_range(-20..20) } else { rng.gen::<i32>() as i64 };
            match ty {
                ScalarType::Int64 => ScalarValue::Int64(if narrow { v } else { rng.gen() }),
                _ => ScalarValue::Int32(v as i32),
            }
        })
        .collect()
}

pub fn env(rng: &mut ChaCha8Rng) -> KernelEnv {
    KernelEnv::new().with(BUF, ScalarType::Int32, values(rng, ScalarType::Int32, BUF_LEN))
}

pub fn case(seed: u64, max_stages: usize, max_n: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pipeline = pipeline(&mut rng, max_stages);
    let n = match rng.gen_range(0..4) {
        0 => rng.gen_range(0..4),
        _ => rng.gen_range(0..=max_n),
    };
    let inputs = pipeline.inputs().iter().map(|&t| values(&mut rng, t, n)).collect();
    let env = env(&mut rng);
    Case { pipeline, inputs, env }
}
