//! Baseline (tier-1) bytecode.
//!
//! A stack machine with explicit recording instructions. Every variable
//! load, callee parameter at entry, and builtin-operator result is
//! immediately followed by a `Record`; those offsets are the stable
//! feedback origins that tier 2 and the profiler refer back to.

use crate::ast::BinOp;
use crate::value::Value;
use std::fmt;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FunctionId(pub u32);

/// Stable identifier of one recording site: the owning function and the
/// baseline offset of the record instruction. Offsets never refer to
/// optimized code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeedbackOrigin {
    pub function: FunctionId,
    pub offset: u32,
}

impl fmt::Display for FeedbackOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fn{}@{}", self.function.0, self.offset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    Length,
    El,
    SetEl,
    Rep,
    Numeric,
    IntegerZeros,
    Sqrt,
    Floor,
    Abs,
    Sum,
    Min,
    Max,
}

impl Builtin {
    pub fn lookup(name: &str) -> Option<(Builtin, usize)> {
        Some(match name {
            "length" => (Builtin::Length, 1),
            "el" => (Builtin::El, 2),
            "setel" => (Builtin::SetEl, 3),
            "rep" => (Builtin::Rep, 2),
            "numeric" => (Builtin::Numeric, 1),
            "integer" => (Builtin::IntegerZeros, 1),
            "sqrt" => (Builtin::Sqrt, 1),
            "floor" => (Builtin::Floor, 1),
            "abs" => (Builtin::Abs, 1),
            "sum" => (Builtin::Sum, 1),
            "min" => (Builtin::Min, 1),
            "max" => (Builtin::Max, 1),
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Length => "length",
            Builtin::El => "el",
            Builtin::SetEl => "setel",
            Builtin::Rep => "rep",
            Builtin::Numeric => "numeric",
            Builtin::IntegerZeros => "integer",
            Builtin::Sqrt => "sqrt",
            Builtin::Floor => "floor",
            Builtin::Abs => "abs",
            Builtin::Sum => "sum",
            Builtin::Min => "min",
            Builtin::Max => "max",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Instr {
    /// Push `consts[idx]`.
    Const(u16),
    /// Push `locals[idx]`; unset locals raise an unbound error.
    LdLocal(u16),
    StLocal(u16),
    /// Push `globals[idx]`; unset globals raise an unbound error.
    LdGlobal(u16),
    StGlobal(u16),
    /// Record the type of the value on top of the operand stack into the
    /// feedback table entry for site ordinal `idx`. Stack-neutral.
    Record(u16),
    Dup,
    Pop,
    Binop(BinOp),
    /// Pop `n` values, push their concatenation.
    Concat(u16),
    /// Attach class tag `tags[idx]` to the top of stack.
    SetClass(u16),
    Call { target: FunctionId, argc: u8 },
    CallBuiltin { builtin: Builtin, argc: u8 },
    Jump(u32),
    JumpIfFalse(u32),
    /// Pop `to` then `from`, initialize loop register `slot`.
    ForSetup { slot: u16 },
    /// Step loop register `slot`: assign the loop variable and continue,
    /// or jump to `exit` when exhausted.
    ForNext { slot: u16, var: u16, exit: u32 },
    /// Push the empty logical vector (value of control statements).
    PushUnit,
    Ret,
}

/// One lowered function: bytecode, literal pool, record sites.
#[derive(Debug, Clone)]
pub struct BaselineFunction {
    pub id: FunctionId,
    pub name: String,
    pub n_params: u16,
    pub n_locals: u16,
    pub n_loops: u16,
    pub code: Vec<Instr>,
    pub consts: Vec<Value>,
    pub tags: Vec<Rc<str>>,
    /// Offsets of `Record` instructions, in code order.
    pub record_sites: Vec<u32>,
    pub local_names: Vec<String>,
    pub is_toplevel: bool,
}

impl BaselineFunction {
    pub fn origin(&self, site: usize) -> FeedbackOrigin {
        FeedbackOrigin { function: self.id, offset: self.record_sites[site] }
    }

    /// Site ordinal for a record offset.
    pub fn site_of_offset(&self, offset: u32) -> Option<usize> {
        self.record_sites.binary_search(&offset).ok()
    }
}

/// A whole lowered program. Function 0 is the synthetic top-level.
#[derive(Debug, Clone)]
pub struct LoweredProgram {
    pub functions: Vec<BaselineFunction>,
    pub global_names: Vec<String>,
    /// Global slot of the harness-provided iteration counter.
    pub iteration_global: u16,
}

pub const TOP_LEVEL: FunctionId = FunctionId(0);

impl LoweredProgram {
    pub fn function(&self, id: FunctionId) -> &BaselineFunction {
        &self.functions[id.0 as usize]
    }

    pub fn function_named(&self, name: &str) -> Option<&BaselineFunction> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn global_slot(&self, name: &str) -> Option<u16> {
        self.global_names.iter().position(|n| n == name).map(|i| i as u16)
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instr::Const(i) => write!(f, "const #{i}"),
            Instr::LdLocal(i) => write!(f, "ldloc {i}"),
            Instr::StLocal(i) => write!(f, "stloc {i}"),
            Instr::LdGlobal(i) => write!(f, "ldvar g{i}"),
            Instr::StGlobal(i) => write!(f, "stvar g{i}"),
            Instr::Record(i) => write!(f, "record #{i}"),
            Instr::Dup => write!(f, "dup"),
            Instr::Pop => write!(f, "pop"),
            Instr::Binop(op) => write!(f, "{}", op.symbol()),
            Instr::Concat(n) => write!(f, "concat {n}"),
            Instr::SetClass(i) => write!(f, "setclass #{i}"),
            Instr::Call { target, argc } => write!(f, "call fn{} ({argc})", target.0),
            Instr::CallBuiltin { builtin, argc } => write!(f, "builtin {} ({argc})", builtin.name()),
            Instr::Jump(t) => write!(f, "jump {t}"),
            Instr::JumpIfFalse(t) => write!(f, "brfalse {t}"),
            Instr::ForSetup { slot } => write!(f, "for.setup {slot}"),
            Instr::ForNext { slot, var, exit } => write!(f, "for.next {slot} var={var} exit={exit}"),
            Instr::PushUnit => write!(f, "pushunit"),
            Instr::Ret => write!(f, "ret"),
        }
    }
}
