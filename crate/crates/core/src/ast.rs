//! Abstract syntax for MiniDyn source programs.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Pow,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Mod => "%%",
            BinOp::Pow => "^",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
        }
    }

    pub fn is_comparison(self) -> bool {
        matches!(self, BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge | BinOp::Eq | BinOp::Ne)
    }
}

impl fmt::Display for BinOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Int(i32),
    Dbl(f64),
    Lgl(bool),
    Var(String),
    Binary { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr> },
    /// Call to a named function or builtin; targets bind statically.
    Call { name: String, args: Vec<Expr> },
    /// `c(e1, e2, ...)` vector construction.
    Concat(Vec<Expr>),
    /// `structure(e, class = "tag")`.
    Structure { value: Box<Expr>, class: String },
    /// Function literal; only legal as the right-hand side of a
    /// top-level assignment.
    Function { params: Vec<String>, body: Vec<Stmt> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    /// `name <- expr` (local in functions, global at top level) or
    /// `name <<- expr` (always global).
    Assign { name: String, superassign: bool, value: Expr },
    For { var: String, from: Expr, to: Expr, body: Vec<Stmt> },
    While { cond: Expr, body: Vec<Stmt> },
    If { cond: Expr, then: Vec<Stmt>, els: Option<Vec<Stmt>> },
    Expr(Expr),
}

/// One named function hoisted from a top-level `name <- function(...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionSource {
    pub name: String,
    pub params: Vec<String>,
    pub body: Vec<Stmt>,
}

/// A parsed program: uniquely named functions plus the remaining
/// top-level statements.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Program {
    pub functions: Vec<FunctionSource>,
    pub top_level: Vec<Stmt>,
}
