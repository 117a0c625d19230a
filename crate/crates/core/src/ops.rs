//! Semantic kernels shared by both tiers.
//!
//! Every arithmetic rule lives here exactly once: the baseline
//! interpreter, the constant folder and the specialized executor all go
//! through these functions, so the tiers cannot drift apart.

use crate::ast::BinOp;
use crate::bytecode::Builtin;
use crate::value::{Kind, Value};
use std::collections::HashMap;
use std::rc::Rc;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RuntimeError {
    #[error("object `{0}` not found")]
    UnboundGlobal(String),
    #[error("object `{0}` not found (local read before assignment)")]
    UnboundLocal(String),
    #[error("length mismatch in `{op}`: {left} vs {right}")]
    LengthMismatch { op: &'static str, left: usize, right: usize },
    #[error("condition must be a scalar, got length {0}")]
    ConditionNotScalar(usize),
    #[error("invalid for-range bound: {0}")]
    ForRangeInvalid(String),
    #[error("index {index} out of bounds for length {len}")]
    IndexOutOfBounds { index: i64, len: usize },
    #[error("{0}")]
    BuiltinDomain(String),
    #[error("call stack exhausted")]
    StackOverflow,
}

// ---------------------------------------------------------------------------
// scalar kernels (used verbatim by the unboxed tier-2 instructions)
// ---------------------------------------------------------------------------

/// Floor modulo on integers, R semantics (result takes the divisor's
/// sign). `None` means the operation leaves the integer domain
/// (division by zero or i32 overflow) and must be redone on doubles.
pub fn imod_floor(a: i32, b: i32) -> Option<i32> {
    if b == 0 {
        return None;
    }
    let r = a.checked_rem(b)?;
    if r != 0 && (r < 0) != (b < 0) {
        Some(r + b)
    } else {
        Some(r)
    }
}

/// Floor modulo on doubles: `a - floor(a/b) * b`.
pub fn dmod_floor(a: f64, b: f64) -> f64 {
    a - (a / b).floor() * b
}

/// Scalar double arithmetic for one operator.
pub fn dbl_arith(op: BinOp, a: f64, b: f64) -> f64 {
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
        BinOp::Mod => dmod_floor(a, b),
        BinOp::Pow => a.powf(b),
        _ => unreachable!("comparison handled elsewhere"),
    }
}

/// Scalar integer arithmetic; `None` requests promotion to doubles.
pub fn int_arith(op: BinOp, a: i32, b: i32) -> Option<i32> {
    match op {
        BinOp::Add => a.checked_add(b),
        BinOp::Sub => a.checked_sub(b),
        BinOp::Mul => a.checked_mul(b),
        BinOp::Mod => imod_floor(a, b),
        // `/` and `^` always leave the integer domain
        BinOp::Div | BinOp::Pow => None,
        _ => unreachable!("comparison handled elsewhere"),
    }
}

pub fn cmp_dbl(op: BinOp, a: f64, b: f64) -> bool {
    match op {
        BinOp::Lt => a < b,
        BinOp::Le => a <= b,
        BinOp::Gt => a > b,
        BinOp::Ge => a >= b,
        BinOp::Eq => a == b,
        BinOp::Ne => a != b,
        _ => unreachable!(),
    }
}

pub fn cmp_int(op: BinOp, a: i32, b: i32) -> bool {
    match op {
        BinOp::Lt => a < b,
        BinOp::Le => a <= b,
        BinOp::Gt => a > b,
        BinOp::Ge => a >= b,
        BinOp::Eq => a == b,
        BinOp::Ne => a != b,
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// vector kernel
// ---------------------------------------------------------------------------

fn broadcast_len(op: &'static str, a: &Value, b: &Value) -> Result<usize, RuntimeError> {
    let (la, lb) = (a.len(), b.len());
    if la == lb {
        Ok(la)
    } else if la == 1 {
        Ok(lb)
    } else if lb == 1 {
        Ok(la)
    } else {
        Err(RuntimeError::LengthMismatch { op, left: la, right: lb })
    }
}

fn result_tag(a: &Value, b: &Value) -> Option<Rc<str>> {
    a.class_tag().or(b.class_tag()).cloned()
}

/// Elementwise binary operation with R-style broadcast of scalars.
///
/// Kind promotion: any double operand makes the result double; `/` and
/// `^` are always double; integer arithmetic that overflows i32 redoes
/// the whole operation on doubles; logicals participate as 0/1
/// integers. Arithmetic results carry the left operand's class tag when
/// either side has one; comparisons yield untagged logicals.
pub fn binop(op: BinOp, a: &Value, b: &Value) -> Result<Value, RuntimeError> {
    let n = broadcast_len(op_name(op), a, b)?;
    if op.is_comparison() {
        let av = a.to_dbl_vec();
        let bv = b.to_dbl_vec();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = av[if av.len() == 1 { 0 } else { i }];
            let y = bv[if bv.len() == 1 { 0 } else { i }];
            out.push(cmp_dbl(op, x, y));
        }
        return Ok(Value::lgl_vec(out));
    }

    let int_domain = !matches!(op, BinOp::Div | BinOp::Pow)
        && a.kind() != Kind::Double
        && b.kind() != Kind::Double;

    let value = if int_domain {
        let av = a.to_int_vec();
        let bv = b.to_int_vec();
        let mut out = Vec::with_capacity(n);
        let mut overflow = false;
        for i in 0..n {
            let x = av[if av.len() == 1 { 0 } else { i }];
            let y = bv[if bv.len() == 1 { 0 } else { i }];
            match int_arith(op, x, y) {
                Some(v) => out.push(v),
                None => {
                    overflow = true;
                    break;
                }
            }
        }
        if overflow {
            dbl_binop_vec(op, a, b, n)
        } else {
            Value::int_vec(out)
        }
    } else {
        dbl_binop_vec(op, a, b, n)
    };

    Ok(match result_tag(a, b) {
        Some(tag) => value.with_class_tag(tag),
        None => value,
    })
}

fn dbl_binop_vec(op: BinOp, a: &Value, b: &Value, n: usize) -> Value {
    let av = a.to_dbl_vec();
    let bv = b.to_dbl_vec();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = av[if av.len() == 1 { 0 } else { i }];
        let y = bv[if bv.len() == 1 { 0 } else { i }];
        out.push(dbl_arith(op, x, y));
    }
    Value::dbl_vec(out)
}

fn op_name(op: BinOp) -> &'static str {
    op.symbol()
}

// ---------------------------------------------------------------------------
// dispatch slow path
// ---------------------------------------------------------------------------

/// Method table consulted for operations on class-tagged operands (and
/// by specialized code whenever tagged operands could not be ruled
/// out). Lookups resolve through the default method for every class;
/// the table exists so ruling dispatch out is a measurable win.
pub struct DispatchTable {
    methods: HashMap<(u8, Option<Rc<str>>, Option<Rc<str>>), MethodId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MethodId {
    Default,
}

impl Default for DispatchTable {
    fn default() -> Self {
        let mut methods = HashMap::new();
        for op in [
            BinOp::Add,
            BinOp::Sub,
            BinOp::Mul,
            BinOp::Div,
            BinOp::Mod,
            BinOp::Pow,
            BinOp::Lt,
            BinOp::Le,
            BinOp::Gt,
            BinOp::Ge,
            BinOp::Eq,
            BinOp::Ne,
        ] {
            methods.insert((op_code(op), None, None), MethodId::Default);
        }
        DispatchTable { methods }
    }
}

fn op_code(op: BinOp) -> u8 {
    op as u8
}

impl DispatchTable {
    /// Dispatching binary operation: looks the (op, class, class) method
    /// up, falls back to the default method, then re-dispatches to the
    /// generic kernel.
    pub fn dispatch_binop(&self, op: BinOp, a: &Value, b: &Value) -> Result<Value, RuntimeError> {
        let key = (op_code(op), a.class_tag().cloned(), b.class_tag().cloned());
        let method = match self.methods.get(&key) {
            Some(m) => *m,
            None => *self
                .methods
                .get(&(op_code(op), None, None))
                .expect("default method registered"),
        };
        match method {
            MethodId::Default => binop(op, a, b),
        }
    }
}

// ---------------------------------------------------------------------------
// control helpers
// ---------------------------------------------------------------------------

/// Condition truthiness: requires a scalar; logicals read directly,
/// numbers compare against zero.
pub fn truthy(v: &Value) -> Result<bool, RuntimeError> {
    if v.len() != 1 {
        return Err(RuntimeError::ConditionNotScalar(v.len()));
    }
    Ok(match v.kind() {
        Kind::Logical => v.as_lgls().unwrap()[0],
        Kind::Integer => v.as_ints().unwrap()[0] != 0,
        Kind::Double => v.as_dbls().unwrap()[0] != 0.0,
    })
}

/// Coerces a loop bound to i32, truncating doubles toward zero.
pub fn for_bound(v: &Value) -> Result<i32, RuntimeError> {
    if v.len() != 1 {
        return Err(RuntimeError::ForRangeInvalid(format!("bound has length {}", v.len())));
    }
    match v.kind() {
        Kind::Integer => Ok(v.as_ints().unwrap()[0]),
        Kind::Logical => Ok(v.as_lgls().unwrap()[0] as i32),
        Kind::Double => {
            let x = v.as_dbls().unwrap()[0];
            for_bound_f64(x)
        }
    }
}

/// Shared by the unboxed tier-2 loop setup.
pub fn for_bound_f64(x: f64) -> Result<i32, RuntimeError> {
    if x.is_nan() || x.is_infinite() || x >= (i32::MAX as f64) + 1.0 || x <= (i32::MIN as f64) - 1.0
    {
        Err(RuntimeError::ForRangeInvalid(format!("bound {x} not representable")))
    } else {
        Ok(x.trunc() as i32)
    }
}

/// Flattens and promotes `c(...)` arguments; attributes are dropped.
pub fn concat(items: &[Value]) -> Value {
    let kind = items.iter().fold(Kind::Logical, |k, v| match (k, v.kind()) {
        (Kind::Double, _) | (_, Kind::Double) => Kind::Double,
        (Kind::Integer, _) | (_, Kind::Integer) => Kind::Integer,
        _ => Kind::Logical,
    });
    match kind {
        Kind::Double => {
            Value::dbl_vec(items.iter().flat_map(|v| v.to_dbl_vec()).collect())
        }
        Kind::Integer => {
            Value::int_vec(items.iter().flat_map(|v| v.to_int_vec()).collect())
        }
        Kind::Logical => Value::lgl_vec(
            items.iter().flat_map(|v| v.as_lgls().unwrap().to_vec()).collect(),
        ),
    }
}

// ---------------------------------------------------------------------------
// builtins
// ---------------------------------------------------------------------------

fn index_arg(v: &Value, len: usize) -> Result<usize, RuntimeError> {
    let idx = match v.kind() {
        Kind::Integer if v.is_scalar() => v.as_ints().unwrap()[0] as i64,
        Kind::Double if v.is_scalar() => {
            let x = v.as_dbls().unwrap()[0];
            if x.is_nan() || x.is_infinite() {
                return Err(RuntimeError::IndexOutOfBounds { index: 0, len });
            }
            x.trunc() as i64
        }
        _ => {
            return Err(RuntimeError::BuiltinDomain("index must be a numeric scalar".into()));
        }
    };
    if idx < 1 || idx as usize > len {
        return Err(RuntimeError::IndexOutOfBounds { index: idx, len });
    }
    Ok(idx as usize - 1)
}

fn count_arg(v: &Value) -> Result<usize, RuntimeError> {
    match v.kind() {
        Kind::Integer if v.is_scalar() => {
            let n = v.as_ints().unwrap()[0];
            if n < 0 {
                Err(RuntimeError::BuiltinDomain(format!("invalid count {n}")))
            } else {
                Ok(n as usize)
            }
        }
        Kind::Double if v.is_scalar() => {
            let x = v.as_dbls().unwrap()[0];
            if !(0.0..=1e9).contains(&x) {
                Err(RuntimeError::BuiltinDomain(format!("invalid count {x}")))
            } else {
                Ok(x.trunc() as usize)
            }
        }
        _ => Err(RuntimeError::BuiltinDomain("count must be a numeric scalar".into())),
    }
}

pub fn call_builtin(builtin: Builtin, args: &[Value]) -> Result<Value, RuntimeError> {
    match builtin {
        Builtin::Length => Ok(Value::int_scalar(args[0].len() as i32)),
        Builtin::El => {
            let v = &args[0];
            let i = index_arg(&args[1], v.len())?;
            Ok(v.element(i).unwrap().without_class_tag())
        }
        Builtin::SetEl => set_element(&args[0], &args[1], &args[2]),
        Builtin::Rep => {
            let times = count_arg(&args[1])?;
            let v = &args[0];
            Ok(match v.kind() {
                Kind::Integer => Value::int_vec(v.as_ints().unwrap().repeat(times)),
                Kind::Double => Value::dbl_vec(v.as_dbls().unwrap().repeat(times)),
                Kind::Logical => Value::lgl_vec(v.as_lgls().unwrap().repeat(times)),
            })
        }
        Builtin::Numeric => Ok(Value::dbl_vec(vec![0.0; count_arg(&args[0])?])),
        Builtin::IntegerZeros => Ok(Value::int_vec(vec![0; count_arg(&args[0])?])),
        Builtin::Sqrt => Ok(Value::dbl_vec(args[0].to_dbl_vec().iter().map(|x| x.sqrt()).collect())),
        Builtin::Floor => {
            Ok(Value::dbl_vec(args[0].to_dbl_vec().iter().map(|x| x.floor()).collect()))
        }
        Builtin::Abs => abs_value(&args[0]),
        Builtin::Sum => sum_value(&args[0]),
        Builtin::Min => reduce_extreme(&args[0], true),
        Builtin::Max => reduce_extreme(&args[0], false),
    }
}

fn set_element(v: &Value, idx: &Value, elem: &Value) -> Result<Value, RuntimeError> {
    if elem.len() != 1 {
        return Err(RuntimeError::BuiltinDomain("setel element must be a scalar".into()));
    }
    let i = index_arg(idx, v.len())?;
    let rank = |k: Kind| match k {
        Kind::Logical => 0,
        Kind::Integer => 1,
        Kind::Double => 2,
    };
    // promote the vector when the element is of a wider kind
    let mut out = if rank(elem.kind()) > rank(v.kind()) {
        let promoted = match elem.kind() {
            Kind::Integer => Value::int_vec(v.to_int_vec()),
            Kind::Double => Value::dbl_vec(v.to_dbl_vec()),
            Kind::Logical => unreachable!(),
        };
        match v.class_tag() {
            Some(tag) => promoted.with_class_tag(tag.clone()),
            None => promoted,
        }
    } else {
        v.clone()
    };
    let elem = match out.kind() {
        k if k == elem.kind() => elem.without_class_tag(),
        Kind::Integer => Value::int_scalar(elem.to_int_vec()[0]),
        Kind::Double => Value::dbl_scalar(elem.to_dbl_vec()[0]),
        Kind::Logical => unreachable!("logical is the narrowest kind"),
    };
    let ok = out.set_element(i, &elem);
    debug_assert!(ok);
    Ok(out)
}

fn abs_value(v: &Value) -> Result<Value, RuntimeError> {
    Ok(match v.kind() {
        Kind::Double => Value::dbl_vec(v.as_dbls().unwrap().iter().map(|x| x.abs()).collect()),
        _ => {
            let ints = v.to_int_vec();
            if ints.iter().all(|x| x.checked_abs().is_some()) {
                Value::int_vec(ints.iter().map(|x| x.abs()).collect())
            } else {
                Value::dbl_vec(ints.iter().map(|&x| (x as f64).abs()).collect())
            }
        }
    })
}

fn sum_value(v: &Value) -> Result<Value, RuntimeError> {
    Ok(match v.kind() {
        Kind::Double => Value::dbl_scalar(v.as_dbls().unwrap().iter().sum()),
        _ => {
            let total: i64 = v.to_int_vec().iter().map(|&x| x as i64).sum();
            match i32::try_from(total) {
                Ok(x) => Value::int_scalar(x),
                Err(_) => Value::dbl_scalar(total as f64),
            }
        }
    })
}

fn reduce_extreme(v: &Value, minimum: bool) -> Result<Value, RuntimeError> {
    if v.is_empty() {
        return Err(RuntimeError::BuiltinDomain(format!(
            "{} of an empty vector",
            if minimum { "min" } else { "max" }
        )));
    }
    Ok(match v.kind() {
        Kind::Double => {
            let xs = v.as_dbls().unwrap();
            let mut acc = xs[0];
            for &x in &xs[1..] {
                if acc.is_nan() || x.is_nan() {
                    acc = f64::NAN;
                } else if (minimum && x < acc) || (!minimum && x > acc) {
                    acc = x;
                }
            }
            Value::dbl_scalar(acc)
        }
        _ => {
            let xs = v.to_int_vec();
            let acc = if minimum {
                *xs.iter().min().unwrap()
            } else {
                *xs.iter().max().unwrap()
            };
            Value::int_scalar(acc)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn int_plus_double_promotes() {
        // the counter example: 1L + 1.0 converts to double
        let v = binop(BinOp::Add, &Value::int_scalar(1), &Value::dbl_scalar(1.0)).unwrap();
        assert_eq!(v.kind(), Kind::Double);
        assert_eq!(v.as_dbls().unwrap(), &[2.0]);
    }

    #[test]
    fn vector_addition() {
        let v = binop(
            BinOp::Add,
            &Value::dbl_vec(vec![1.0, 1.0]),
            &Value::dbl_vec(vec![2.0, 2.0]),
        )
        .unwrap();
        assert_eq!(v.as_dbls().unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn add_zero_identity() {
        let x = Value::int_vec(vec![5, 6]);
        let v = binop(BinOp::Add, &x, &Value::int_scalar(0)).unwrap();
        assert!(v.identical(&x));
    }

    #[test]
    fn integer_overflow_promotes_whole_vector() {
        let v = binop(
            BinOp::Add,
            &Value::int_vec(vec![1, i32::MAX]),
            &Value::int_scalar(1),
        )
        .unwrap();
        assert_eq!(v.kind(), Kind::Double);
        assert_eq!(v.as_dbls().unwrap(), &[2.0, i32::MAX as f64 + 1.0]);
    }

    #[test]
    fn division_by_zero_is_infinite() {
        let v = binop(BinOp::Div, &Value::int_scalar(5), &Value::int_scalar(0)).unwrap();
        assert_eq!(v.as_dbls().unwrap(), &[f64::INFINITY]);
    }

    #[test]
    fn modulo_takes_divisor_sign() {
        assert_eq!(imod_floor(5, 3), Some(2));
        assert_eq!(imod_floor(-5, 3), Some(1));
        assert_eq!(imod_floor(5, -3), Some(-1));
        assert_eq!(imod_floor(5, 0), None);
        assert_eq!(dmod_floor(5.0, 3.0), 2.0);
        assert_eq!(dmod_floor(-5.0, 3.0), 1.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let err = binop(
            BinOp::Add,
            &Value::int_vec(vec![1, 2]),
            &Value::int_vec(vec![1, 2, 3]),
        )
        .unwrap_err();
        assert!(matches!(err, RuntimeError::LengthMismatch { .. }));
    }

    #[test]
    fn tag_propagates_from_left() {
        let tagged = Value::dbl_scalar(1.0).with_class_tag("foo".into());
        let v = binop(BinOp::Add, &tagged, &Value::dbl_scalar(1.0)).unwrap();
        assert_eq!(v.class_tag().map(|t| &**t), Some("foo"));
        let v = binop(BinOp::Add, &Value::dbl_scalar(1.0), &tagged).unwrap();
        assert_eq!(v.class_tag().map(|t| &**t), Some("foo"));
        // comparisons drop tags
        let v = binop(BinOp::Lt, &tagged, &Value::dbl_scalar(2.0)).unwrap();
        assert!(v.class_tag().is_none());
    }

    #[test]
    fn dispatch_table_matches_generic_kernel() {
        let table = DispatchTable::default();
        let tagged = Value::dbl_scalar(2.0).with_class_tag("foo".into());
        let plain = Value::dbl_scalar(3.0);
        for (a, b) in [(&tagged, &plain), (&plain, &plain)] {
            let via_dispatch = table.dispatch_binop(BinOp::Mul, a, b).unwrap();
            let direct = binop(BinOp::Mul, a, b).unwrap();
            assert!(via_dispatch.identical(&direct));
        }
    }

    #[test]
    fn concat_promotes_and_flattens() {
        let v = concat(&[
            Value::int_scalar(1),
            Value::dbl_vec(vec![2.0, 3.0]),
            Value::lgl_scalar(true),
        ]);
        assert_eq!(v.kind(), Kind::Double);
        assert_eq!(v.as_dbls().unwrap(), &[1.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn builtin_el_setel_round_trip() {
        let v = Value::dbl_vec(vec![1.0, 2.0]);
        let e = call_builtin(Builtin::El, &[v.clone(), Value::int_scalar(2)]).unwrap();
        assert_eq!(e.as_dbls().unwrap(), &[2.0]);
        let w =
            call_builtin(Builtin::SetEl, &[v.clone(), Value::int_scalar(1), Value::int_scalar(9)])
                .unwrap();
        assert_eq!(w.as_dbls().unwrap(), &[9.0, 2.0]);
        assert_eq!(v.as_dbls().unwrap(), &[1.0, 2.0]);
        let err = call_builtin(Builtin::El, &[v, Value::int_scalar(3)]).unwrap_err();
        assert!(matches!(err, RuntimeError::IndexOutOfBounds { index: 3, len: 2 }));
    }

    #[test]
    fn setel_promotes_vector_kind() {
        let v = Value::int_vec(vec![1, 2]);
        let w = call_builtin(
            Builtin::SetEl,
            &[v, Value::int_scalar(1), Value::dbl_scalar(0.5)],
        )
        .unwrap();
        assert_eq!(w.kind(), Kind::Double);
        assert_eq!(w.as_dbls().unwrap(), &[0.5, 2.0]);
    }

    #[test]
    fn truthiness() {
        assert!(truthy(&Value::lgl_scalar(true)).unwrap());
        assert!(!truthy(&Value::int_scalar(0)).unwrap());
        assert!(truthy(&Value::dbl_scalar(2.0)).unwrap());
        assert!(truthy(&Value::unit()).is_err());
        assert!(truthy(&Value::int_vec(vec![1, 2])).is_err());
    }

    #[test]
    fn for_bounds_truncate() {
        assert_eq!(for_bound(&Value::dbl_scalar(2.9)).unwrap(), 2);
        assert_eq!(for_bound(&Value::int_scalar(7)).unwrap(), 7);
        assert!(for_bound(&Value::dbl_scalar(f64::NAN)).is_err());
        assert!(for_bound(&Value::dbl_scalar(1e18)).is_err());
    }
}
