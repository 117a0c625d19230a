//! Boxed, vectorized runtime values.
//!
//! Every MiniDyn value is a vector of one primitive kind; scalars are
//! vectors of length one. An optional class tag stands in for object
//! attributes and routes arithmetic through the dispatch slow path.

use std::fmt;
use std::rc::Rc;

/// Primitive kind of a value or feedback entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kind {
    Integer,
    Double,
    Logical,
}

impl Kind {
    pub fn short(self) -> &'static str {
        match self {
            Kind::Integer => "int",
            Kind::Double => "dbl",
            Kind::Logical => "lgl",
        }
    }
}

#[derive(Debug, Clone)]
enum Payload {
    Int(Rc<[i32]>),
    Dbl(Rc<[f64]>),
    Lgl(Rc<[bool]>),
}

/// A runtime value: primitive kind, payload vector, optional class tag.
///
/// The payload is reference counted; cloning a `Value` is cheap and the
/// mutating helpers copy on write, which gives R's value semantics.
#[derive(Debug, Clone)]
pub struct Value {
    payload: Payload,
    class_tag: Option<Rc<str>>,
}

impl Value {
    pub fn int_scalar(v: i32) -> Value {
        Value { payload: Payload::Int(Rc::from([v])), class_tag: None }
    }

    pub fn dbl_scalar(v: f64) -> Value {
        Value { payload: Payload::Dbl(Rc::from([v])), class_tag: None }
    }

    pub fn lgl_scalar(v: bool) -> Value {
        Value { payload: Payload::Lgl(Rc::from([v])), class_tag: None }
    }

    pub fn int_vec(v: Vec<i32>) -> Value {
        Value { payload: Payload::Int(v.into()), class_tag: None }
    }

    pub fn dbl_vec(v: Vec<f64>) -> Value {
        Value { payload: Payload::Dbl(v.into()), class_tag: None }
    }

    pub fn lgl_vec(v: Vec<bool>) -> Value {
        Value { payload: Payload::Lgl(v.into()), class_tag: None }
    }

    /// Empty logical vector: the result of statements that yield nothing
    /// (`for`, `while`, statement-`if`).
    pub fn unit() -> Value {
        Value { payload: Payload::Lgl(Rc::from([] as [bool; 0])), class_tag: None }
    }

    pub fn kind(&self) -> Kind {
        match &self.payload {
            Payload::Int(_) => Kind::Integer,
            Payload::Dbl(_) => Kind::Double,
            Payload::Lgl(_) => Kind::Logical,
        }
    }

    pub fn len(&self) -> usize {
        match &self.payload {
            Payload::Int(v) => v.len(),
            Payload::Dbl(v) => v.len(),
            Payload::Lgl(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn class_tag(&self) -> Option<&Rc<str>> {
        self.class_tag.as_ref()
    }

    /// Returns a copy of this value carrying the given class tag.
    /// The tag must be nonempty.
    pub fn with_class_tag(&self, tag: Rc<str>) -> Value {
        debug_assert!(!tag.is_empty(), "class tags are nonempty");
        Value { payload: self.payload.clone(), class_tag: Some(tag) }
    }

    pub fn without_class_tag(&self) -> Value {
        Value { payload: self.payload.clone(), class_tag: None }
    }

    pub fn as_ints(&self) -> Option<&[i32]> {
        match &self.payload {
            Payload::Int(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_dbls(&self) -> Option<&[f64]> {
        match &self.payload {
            Payload::Dbl(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_lgls(&self) -> Option<&[bool]> {
        match &self.payload {
            Payload::Lgl(v) => Some(v),
            _ => None,
        }
    }

    /// Untagged scalar i32, if this is exactly that.
    pub fn scalar_i32(&self) -> Option<i32> {
        match (&self.payload, &self.class_tag) {
            (Payload::Int(v), None) if v.len() == 1 => Some(v[0]),
            _ => None,
        }
    }

    /// Untagged scalar f64, if this is exactly that.
    pub fn scalar_f64(&self) -> Option<f64> {
        match (&self.payload, &self.class_tag) {
            (Payload::Dbl(v), None) if v.len() == 1 => Some(v[0]),
            _ => None,
        }
    }

    /// Untagged scalar bool, if this is exactly that.
    pub fn scalar_bool(&self) -> Option<bool> {
        match (&self.payload, &self.class_tag) {
            (Payload::Lgl(v), None) if v.len() == 1 => Some(v[0]),
            _ => None,
        }
    }

    /// Element at `idx` (0-based) as a scalar value of the same kind.
    pub fn element(&self, idx: usize) -> Option<Value> {
        if idx >= self.len() {
            return None;
        }
        Some(match &self.payload {
            Payload::Int(v) => Value::int_scalar(v[idx]),
            Payload::Dbl(v) => Value::dbl_scalar(v[idx]),
            Payload::Lgl(v) => Value::lgl_scalar(v[idx]),
        })
    }

    /// Numeric view of element `idx`, promoting integers and logicals.
    pub fn element_f64(&self, idx: usize) -> Option<f64> {
        if idx >= self.len() {
            return None;
        }
        Some(match &self.payload {
            Payload::Int(v) => v[idx] as f64,
            Payload::Dbl(v) => v[idx],
            Payload::Lgl(v) => v[idx] as i32 as f64,
        })
    }

    /// In-place element store when the payload is uniquely owned,
    /// otherwise copies first. Kinds must match.
    pub fn set_element(&mut self, idx: usize, elem: &Value) -> bool {
        debug_assert!(elem.is_scalar());
        match (&mut self.payload, &elem.payload) {
            (Payload::Int(v), Payload::Int(e)) => {
                if idx >= v.len() {
                    return false;
                }
                make_unique_i32(v)[idx] = e[0];
                true
            }
            (Payload::Dbl(v), Payload::Dbl(e)) => {
                if idx >= v.len() {
                    return false;
                }
                make_unique_f64(v)[idx] = e[0];
                true
            }
            (Payload::Lgl(v), Payload::Lgl(e)) => {
                if idx >= v.len() {
                    return false;
                }
                make_unique_bool(v)[idx] = e[0];
                true
            }
            _ => false,
        }
    }

    /// Kind-conversion helpers. Each returns a fresh vector of the target
    /// kind; logicals convert through their 0/1 integer reading.
    pub fn to_dbl_vec(&self) -> Vec<f64> {
        match &self.payload {
            Payload::Int(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::Dbl(v) => v.to_vec(),
            Payload::Lgl(v) => v.iter().map(|&x| x as i32 as f64).collect(),
        }
    }

    pub fn to_int_vec(&self) -> Vec<i32> {
        match &self.payload {
            Payload::Int(v) => v.to_vec(),
            Payload::Dbl(v) => v.iter().map(|&x| x as i32).collect(),
            Payload::Lgl(v) => v.iter().map(|&x| x as i32).collect(),
        }
    }

    /// Bit-exact structural equality: kind, length, class tag and payload
    /// bits (NaN compares equal to the identical NaN).
    pub fn identical(&self, other: &Value) -> bool {
        if self.class_tag.as_deref() != other.class_tag.as_deref() {
            return false;
        }
        match (&self.payload, &other.payload) {
            (Payload::Int(a), Payload::Int(b)) => a == b,
            (Payload::Lgl(a), Payload::Lgl(b)) => a == b,
            (Payload::Dbl(a), Payload::Dbl(b)) => {
                a.len() == b.len()
                    && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

fn make_unique_i32(rc: &mut Rc<[i32]>) -> &mut [i32] {
    if Rc::get_mut(rc).is_none() {
        *rc = Rc::from(&rc[..]);
    }
    Rc::get_mut(rc).unwrap()
}

fn make_unique_f64(rc: &mut Rc<[f64]>) -> &mut [f64] {
    if Rc::get_mut(rc).is_none() {
        *rc = Rc::from(&rc[..]);
    }
    Rc::get_mut(rc).unwrap()
}

fn make_unique_bool(rc: &mut Rc<[bool]>) -> &mut [bool] {
    if Rc::get_mut(rc).is_none() {
        *rc = Rc::from(&rc[..]);
    }
    Rc::get_mut(rc).unwrap()
}

impl fmt::Display for Value {
    /// R-flavoured rendering: `[1] 1 2 3`, logicals as TRUE/FALSE,
    /// integers without a suffix.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            match self.kind() {
                Kind::Integer => write!(f, "integer(0)")?,
                Kind::Double => write!(f, "numeric(0)")?,
                Kind::Logical => write!(f, "logical(0)")?,
            }
        } else {
            write!(f, "[1]")?;
            match &self.payload {
                Payload::Int(v) => {
                    for x in v.iter() {
                        write!(f, " {x}")?;
                    }
                }
                Payload::Dbl(v) => {
                    for x in v.iter() {
                        write!(f, " {x}")?;
                    }
                }
                Payload::Lgl(v) => {
                    for x in v.iter() {
                        write!(f, " {}", if *x { "TRUE" } else { "FALSE" })?;
                    }
                }
            }
        }
        if let Some(tag) = &self.class_tag {
            write!(f, "\nattr(,\"class\") \"{tag}\"")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_iff_length_one() {
        assert!(Value::int_scalar(1).is_scalar());
        assert!(!Value::dbl_vec(vec![1.0, 2.0, 3.0]).is_scalar());
        assert!(!Value::unit().is_scalar());
        assert_eq!(Value::unit().len(), 0);
    }

    #[test]
    fn class_tag_round_trip() {
        let v = Value::dbl_scalar(1.0).with_class_tag("foo".into());
        assert_eq!(v.class_tag().map(|t| &**t), Some("foo"));
        assert!(v.without_class_tag().class_tag().is_none());
        // tagged scalars are not plain scalars for unboxing purposes
        assert!(v.scalar_f64().is_none());
    }

    #[test]
    fn copy_on_write_set_element() {
        let a = Value::int_vec(vec![1, 2, 3]);
        let mut b = a.clone();
        assert!(b.set_element(0, &Value::int_scalar(9)));
        assert_eq!(a.as_ints().unwrap(), &[1, 2, 3]);
        assert_eq!(b.as_ints().unwrap(), &[9, 2, 3]);
    }

    #[test]
    fn identical_is_bit_exact() {
        assert!(Value::dbl_scalar(f64::NAN).identical(&Value::dbl_scalar(f64::NAN)));
        assert!(!Value::dbl_scalar(1.0).identical(&Value::int_scalar(1)));
        assert!(!Value::dbl_scalar(1.0)
            .identical(&Value::dbl_scalar(1.0).with_class_tag("foo".into())));
    }
}
