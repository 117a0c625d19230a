//! Lowers parsed programs to baseline bytecode.
//!
//! Recording instructions are inserted after every variable load, after
//! every builtin-operator result, and for each parameter at function
//! entry. Lowering is deterministic: the same source always produces
//! identical bytecode and record sites, which is what keeps feedback
//! origins stable across recompilations.
//!
//! Literal-only subtrees are folded at lowering time with the runtime
//! kernels, so folding cannot drift from execution semantics. `^` with a
//! literal whole exponent in 1..=31 lowers to a repeated-multiply chain
//! (right-associated, matching the emitted `dup`/`*` sequence) and
//! records once, for the final result.

use crate::ast::{BinOp, Expr, Program, Stmt};
use crate::bytecode::{
    BaselineFunction, Builtin, FunctionId, Instr, LoweredProgram, TOP_LEVEL,
};
use crate::ops;
use crate::value::Value;
use std::collections::HashMap;
use std::rc::Rc;

/// Name of the harness-maintained iteration counter global.
pub const ITERATION_GLOBAL: &str = "ITERATION";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LoweringError {
    #[error("unresolvable identifier `{0}`")]
    Unresolvable(String),
    #[error("`{0}` is not a function or builtin")]
    UnknownFunction(String),
    #[error("`{name}` expects {expected} argument(s), got {got}")]
    ArityMismatch { name: String, expected: usize, got: usize },
    #[error("function literals are only allowed as top-level definitions")]
    NestedFunction,
}

pub fn lower(program: &Program) -> Result<LoweredProgram, LoweringError> {
    let globals = collect_globals(program);
    let mut fn_ids = HashMap::new();
    for (i, f) in program.functions.iter().enumerate() {
        fn_ids.insert(f.name.clone(), FunctionId(i as u32 + 1));
    }
    let arities: HashMap<String, usize> =
        program.functions.iter().map(|f| (f.name.clone(), f.params.len())).collect();

    let env = Env { globals: &globals, fn_ids: &fn_ids, arities: &arities };

    let mut functions = Vec::with_capacity(program.functions.len() + 1);
    functions.push(lower_function(
        &env,
        TOP_LEVEL,
        "(top)",
        &[],
        &program.top_level,
        true,
    )?);
    for (i, f) in program.functions.iter().enumerate() {
        functions.push(lower_function(
            &env,
            FunctionId(i as u32 + 1),
            &f.name,
            &f.params,
            &f.body,
            false,
        )?);
    }

    Ok(LoweredProgram { functions, global_names: globals, iteration_global: 0 })
}

/// Convenience: parse then lower.
pub fn compile(source: &str) -> Result<LoweredProgram, CompileError> {
    let program = crate::parser::parse(source)?;
    Ok(lower(&program)?)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompileError {
    #[error(transparent)]
    Syntax(#[from] crate::lexer::SyntaxError),
    #[error(transparent)]
    Lowering(#[from] LoweringError),
}

/// Every name that denotes a global slot: the iteration counter, all
/// top-level assignment and loop-variable targets, and every `<<-`
/// target anywhere.
fn collect_globals(program: &Program) -> Vec<String> {
    let mut names = vec![ITERATION_GLOBAL.to_string()];
    let mut add = |n: &str| {
        if !names.iter().any(|x| x == n) {
            names.push(n.to_string());
        }
    };
    fn walk(stmts: &[Stmt], top: bool, add: &mut dyn FnMut(&str)) {
        for s in stmts {
            match s {
                Stmt::Assign { name, superassign, value } => {
                    if *superassign || top {
                        add(name);
                    }
                    walk_expr(value, add);
                }
                Stmt::For { var, from, to, body } => {
                    if top {
                        add(var);
                    }
                    walk_expr(from, add);
                    walk_expr(to, add);
                    walk(body, top, add);
                }
                Stmt::While { cond, body } => {
                    walk_expr(cond, add);
                    walk(body, top, add);
                }
                Stmt::If { cond, then, els } => {
                    walk_expr(cond, add);
                    walk(then, top, add);
                    if let Some(e) = els {
                        walk(e, top, add);
                    }
                }
                Stmt::Expr(e) => walk_expr(e, add),
            }
        }
    }
    fn walk_expr(e: &Expr, add: &mut dyn FnMut(&str)) {
        match e {
            Expr::Binary { lhs, rhs, .. } => {
                walk_expr(lhs, add);
                walk_expr(rhs, add);
            }
            Expr::Call { args, .. } | Expr::Concat(args) => {
                for a in args {
                    walk_expr(a, add);
                }
            }
            Expr::Structure { value, .. } => walk_expr(value, add),
            Expr::Function { body, .. } => walk(body, false, add),
            _ => {}
        }
    }
    walk(&program.top_level, true, &mut add);
    for f in &program.functions {
        walk(&f.body, false, &mut add);
    }
    names
}

struct Env<'a> {
    globals: &'a [String],
    fn_ids: &'a HashMap<String, FunctionId>,
    arities: &'a HashMap<String, usize>,
}

struct FnLowerer<'a> {
    env: &'a Env<'a>,
    code: Vec<Instr>,
    consts: Vec<Value>,
    tags: Vec<Rc<str>>,
    record_sites: Vec<u32>,
    locals: Vec<String>,
    is_toplevel: bool,
    loop_depth: u16,
    max_loops: u16,
}

fn lower_function(
    env: &Env,
    id: FunctionId,
    name: &str,
    params: &[String],
    body: &[Stmt],
    is_toplevel: bool,
) -> Result<BaselineFunction, LoweringError> {
    let mut locals: Vec<String> = params.to_vec();
    if !is_toplevel {
        collect_locals(body, &mut locals);
    }
    let mut lw = FnLowerer {
        env,
        code: Vec::new(),
        consts: Vec::new(),
        tags: Vec::new(),
        record_sites: Vec::new(),
        locals,
        is_toplevel,
        loop_depth: 0,
        max_loops: 0,
    };

    // parameter entry records
    for i in 0..params.len() {
        lw.code.push(Instr::LdLocal(i as u16));
        lw.record();
        lw.code.push(Instr::Pop);
    }

    if body.is_empty() {
        lw.code.push(Instr::PushUnit);
    } else {
        for (i, stmt) in body.iter().enumerate() {
            lw.stmt(stmt, i + 1 == body.len())?;
        }
    }
    lw.code.push(Instr::Ret);

    debug_assert!(lw.record_sites.windows(2).all(|w| w[0] < w[1]));
    Ok(BaselineFunction {
        id,
        name: name.to_string(),
        n_params: params.len() as u16,
        n_locals: lw.locals.len() as u16,
        n_loops: lw.max_loops,
        code: lw.code,
        consts: lw.consts,
        tags: lw.tags,
        record_sites: lw.record_sites,
        local_names: lw.locals,
        is_toplevel,
    })
}

/// Names assigned with `<-` or used as loop variables become locals for
/// the whole function body.
fn collect_locals(stmts: &[Stmt], out: &mut Vec<String>) {
    let mut add = |n: &str| {
        if !out.iter().any(|x| x == n) {
            out.push(n.to_string());
        }
    };
    for s in stmts {
        match s {
            Stmt::Assign { name, superassign: false, .. } => add(name),
            Stmt::Assign { .. } => {}
            Stmt::For { var, body, .. } => {
                add(var);
                collect_locals_inner(body, &mut add);
            }
            Stmt::While { body, .. } => collect_locals_inner(body, &mut add),
            Stmt::If { then, els, .. } => {
                collect_locals_inner(then, &mut add);
                if let Some(e) = els {
                    collect_locals_inner(e, &mut add);
                }
            }
            Stmt::Expr(_) => {}
        }
    }
}

fn collect_locals_inner(stmts: &[Stmt], add: &mut dyn FnMut(&str)) {
    for s in stmts {
        match s {
            Stmt::Assign { name, superassign: false, .. } => add(name),
            Stmt::Assign { .. } => {}
            Stmt::For { var, body, .. } => {
                add(var);
                collect_locals_inner(body, add);
            }
            Stmt::While { body, .. } => collect_locals_inner(body, add),
            Stmt::If { then, els, .. } => {
                collect_locals_inner(then, add);
                if let Some(e) = els {
                    collect_locals_inner(e, add);
                }
            }
            Stmt::Expr(_) => {}
        }
    }
}

/// Exponents eligible for the repeated-multiplication lowering of `^`.
pub fn literal_small_exponent(e: &Expr) -> Option<u32> {
    match e {
        Expr::Int(k) if (1..=31).contains(k) => Some(*k as u32),
        Expr::Dbl(x) if x.fract() == 0.0 && (1.0..=31.0).contains(x) => Some(*x as u32),
        _ => None,
    }
}

/// Evaluates literal-only subtrees with the runtime kernels.
pub fn fold_expr(e: &Expr) -> Option<Value> {
    match e {
        Expr::Int(v) => Some(Value::int_scalar(*v)),
        Expr::Dbl(v) => Some(Value::dbl_scalar(*v)),
        Expr::Lgl(v) => Some(Value::lgl_scalar(*v)),
        Expr::Binary { op, lhs, rhs } => {
            let a = fold_expr(lhs)?;
            let b = fold_expr(rhs)?;
            if *op == BinOp::Pow {
                if let Some(k) = literal_small_exponent(rhs) {
                    // x*(x*(...)) to match the dup/mul chain exactly
                    let mut acc = a.clone();
                    for _ in 1..k {
                        acc = ops::binop(BinOp::Mul, &a, &acc).ok()?;
                    }
                    return Some(acc);
                }
            }
            ops::binop(*op, &a, &b).ok()
        }
        _ => None,
    }
}

impl FnLowerer<'_> {
    fn record(&mut self) {
        let offset = self.code.len() as u32;
        let ordinal = self.record_sites.len() as u16;
        self.code.push(Instr::Record(ordinal));
        self.record_sites.push(offset);
    }

    fn emit_const(&mut self, v: Value) {
        let idx = self
            .consts
            .iter()
            .position(|c| c.identical(&v))
            .unwrap_or_else(|| {
                self.consts.push(v);
                self.consts.len() - 1
            });
        self.code.push(Instr::Const(idx as u16));
    }

    fn local_slot(&self, name: &str) -> Option<u16> {
        self.locals.iter().position(|n| n == name).map(|i| i as u16)
    }

    fn global_slot(&self, name: &str) -> Option<u16> {
        self.env.globals.iter().position(|n| n == name).map(|i| i as u16)
    }

    fn expr(&mut self, e: &Expr) -> Result<(), LoweringError> {
        if let Some(v) = fold_expr(e) {
            self.emit_const(v);
            return Ok(());
        }
        match e {
            // literals are handled by folding above
            Expr::Int(_) | Expr::Dbl(_) | Expr::Lgl(_) => unreachable!("folded"),
            Expr::Var(name) => {
                if !self.is_toplevel {
                    if let Some(slot) = self.local_slot(name) {
                        self.code.push(Instr::LdLocal(slot));
                        self.record();
                        return Ok(());
                    }
                }
                if let Some(slot) = self.global_slot(name) {
                    self.code.push(Instr::LdGlobal(slot));
                    self.record();
                    Ok(())
                } else {
                    Err(LoweringError::Unresolvable(name.clone()))
                }
            }
            Expr::Binary { op: BinOp::Pow, lhs, rhs }
                if literal_small_exponent(rhs).is_some() =>
            {
                let k = literal_small_exponent(rhs).unwrap();
                self.expr(lhs)?;
                for _ in 1..k {
                    self.code.push(Instr::Dup);
                }
                for _ in 1..k {
                    self.code.push(Instr::Binop(BinOp::Mul));
                }
                self.record();
                Ok(())
            }
            Expr::Binary { op, lhs, rhs } => {
                self.expr(lhs)?;
                self.expr(rhs)?;
                self.code.push(Instr::Binop(*op));
                self.record();
                Ok(())
            }
            Expr::Call { name, args } => {
                if let Some(&target) = self.env.fn_ids.get(name) {
                    let expected = self.env.arities[name];
                    if args.len() != expected {
                        return Err(LoweringError::ArityMismatch {
                            name: name.clone(),
                            expected,
                            got: args.len(),
                        });
                    }
                    for a in args {
                        self.expr(a)?;
                    }
                    self.code.push(Instr::Call { target, argc: args.len() as u8 });
                    Ok(())
                } else if let Some((builtin, arity)) = Builtin::lookup(name) {
                    if args.len() != arity {
                        return Err(LoweringError::ArityMismatch {
                            name: name.clone(),
                            expected: arity,
                            got: args.len(),
                        });
                    }
                    for a in args {
                        self.expr(a)?;
                    }
                    self.code.push(Instr::CallBuiltin { builtin, argc: args.len() as u8 });
                    self.record();
                    Ok(())
                } else {
                    Err(LoweringError::UnknownFunction(name.clone()))
                }
            }
            Expr::Concat(args) => {
                for a in args {
                    self.expr(a)?;
                }
                self.code.push(Instr::Concat(args.len() as u16));
                self.record();
                Ok(())
            }
            Expr::Structure { value, class } => {
                self.expr(value)?;
                let idx = self
                    .tags
                    .iter()
                    .position(|t| &**t == class.as_str())
                    .unwrap_or_else(|| {
                        self.tags.push(Rc::from(class.as_str()));
                        self.tags.len() - 1
                    });
                self.code.push(Instr::SetClass(idx as u16));
                self.record();
                Ok(())
            }
            Expr::Function { .. } => Err(LoweringError::NestedFunction),
        }
    }

    /// Emits an assignment target store.
    fn store(&mut self, name: &str, superassign: bool) -> Result<(), LoweringError> {
        if !superassign && !self.is_toplevel {
            let slot = self.local_slot(name).expect("assignment targets are locals");
            self.code.push(Instr::StLocal(slot));
            return Ok(());
        }
        match self.global_slot(name) {
            Some(slot) => {
                self.code.push(Instr::StGlobal(slot));
                Ok(())
            }
            None => Err(LoweringError::Unresolvable(name.to_string())),
        }
    }

    fn stmt(&mut self, s: &Stmt, keep: bool) -> Result<(), LoweringError> {
        match s {
            Stmt::Expr(e) => {
                self.expr(e)?;
                if !keep {
                    self.code.push(Instr::Pop);
                }
                Ok(())
            }
            Stmt::Assign { name, superassign, value } => {
                self.expr(value)?;
                if keep {
                    self.code.push(Instr::Dup);
                }
                self.store(name, *superassign)
            }
            Stmt::For { var, from, to, body } => {
                self.expr(from)?;
                self.expr(to)?;
                let slot = self.loop_depth;
                self.loop_depth += 1;
                self.max_loops = self.max_loops.max(self.loop_depth);
                self.code.push(Instr::ForSetup { slot });

                let (var_slot, var_global) = if !self.is_toplevel {
                    (self.local_slot(var).expect("loop vars are locals"), false)
                } else {
                    (
                        self.global_slot(var)
                            .ok_or_else(|| LoweringError::Unresolvable(var.clone()))?,
                        true,
                    )
                };
                let head = self.code.len() as u32;
                let fornext_at = self.code.len();
                // exit target patched below; var_global is encoded by
                // offsetting the var slot, see `ForNext` execution
                self.code.push(Instr::ForNext {
                    slot,
                    var: encode_for_var(var_slot, var_global),
                    exit: 0,
                });
                for b in body {
                    self.stmt(b, false)?;
                }
                self.code.push(Instr::Jump(head));
                let exit = self.code.len() as u32;
                if let Instr::ForNext { exit: e, .. } = &mut self.code[fornext_at] {
                    *e = exit;
                }
                self.loop_depth -= 1;
                if keep {
                    self.code.push(Instr::PushUnit);
                }
                Ok(())
            }
            Stmt::While { cond, body } => {
                let head = self.code.len() as u32;
                self.expr(cond)?;
                let br_at = self.code.len();
                self.code.push(Instr::JumpIfFalse(0));
                for b in body {
                    self.stmt(b, false)?;
                }
                self.code.push(Instr::Jump(head));
                let exit = self.code.len() as u32;
                if let Instr::JumpIfFalse(t) = &mut self.code[br_at] {
                    *t = exit;
                }
                if keep {
                    self.code.push(Instr::PushUnit);
                }
                Ok(())
            }
            Stmt::If { cond, then, els } => {
                self.expr(cond)?;
                let br_at = self.code.len();
                self.code.push(Instr::JumpIfFalse(0));
                for b in then {
                    self.stmt(b, false)?;
                }
                match els {
                    Some(els_body) => {
                        let jmp_at = self.code.len();
                        self.code.push(Instr::Jump(0));
                        let else_target = self.code.len() as u32;
                        if let Instr::JumpIfFalse(t) = &mut self.code[br_at] {
                            *t = else_target;
                        }
                        for b in els_body {
                            self.stmt(b, false)?;
                        }
                        let end = self.code.len() as u32;
                        if let Instr::Jump(t) = &mut self.code[jmp_at] {
                            *t = end;
                        }
                    }
                    None => {
                        let end = self.code.len() as u32;
                        if let Instr::JumpIfFalse(t) = &mut self.code[br_at] {
                            *t = end;
                        }
                    }
                }
                if keep {
                    self.code.push(Instr::PushUnit);
                }
                Ok(())
            }
        }
    }
}

/// Loop variables at top level live in globals; the slot is tagged in
/// the high bit.
pub fn encode_for_var(slot: u16, global: bool) -> u16 {
    debug_assert!(slot < 0x8000);
    if global {
        slot | 0x8000
    } else {
        slot
    }
}

pub fn decode_for_var(encoded: u16) -> (u16, bool) {
    (encoded & 0x7fff, encoded & 0x8000 != 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse;

    fn lower_src(src: &str) -> LoweredProgram {
        lower(&parse(src).unwrap()).unwrap()
    }

    #[test]
    fn listing_one_lowering_order() {
        let lp = lower_src("f <- function() x+x+x+x+1L\nx <- 1L");
        let f = lp.function_named("f").unwrap();
        // code begins: ldvar x; record; ldvar x; record; add; record; ...
        let head: Vec<String> = f.code.iter().take(6).map(|i| i.to_string()).collect();
        assert_eq!(head[0], "ldvar g1");
        assert!(head[1].starts_with("record"));
        assert_eq!(head[2], "ldvar g1");
        assert!(head[3].starts_with("record"));
        assert_eq!(head[4], "+");
        assert!(head[5].starts_with("record"));
        // 4 loads + 4 op results = 8 record sites
        assert_eq!(f.record_sites.len(), 8);
    }

    #[test]
    fn minimal_function_has_two_record_sites() {
        let lp = lower_src("f <- function(a) a");
        let f = lp.function_named("f").unwrap();
        // entry record for the parameter, then load+record
        assert_eq!(f.record_sites.len(), 2);
        assert_eq!(f.code[0], Instr::LdLocal(0));
        assert!(matches!(f.code[1], Instr::Record(0)));
        assert_eq!(f.code[2], Instr::Pop);
        assert_eq!(f.code[3], Instr::LdLocal(0));
        assert!(matches!(f.code[4], Instr::Record(1)));
        assert_eq!(f.code[5], Instr::Ret);
    }

    /// Independent AST-walk oracle: counts the record sites lowering
    /// must produce for a function — one per parameter, one per
    /// variable load, one per builtin-operator result — skipping
    /// literal-only subtrees, which fold to constants.
    fn expected_sites(params: usize, body: &[Stmt]) -> usize {
        fn is_const(e: &Expr) -> bool {
            match e {
                Expr::Int(_) | Expr::Dbl(_) | Expr::Lgl(_) => true,
                Expr::Binary { lhs, rhs, .. } => is_const(lhs) && is_const(rhs),
                _ => false,
            }
        }
        fn expr_sites(e: &Expr) -> usize {
            if is_const(e) {
                return 0;
            }
            match e {
                Expr::Int(_) | Expr::Dbl(_) | Expr::Lgl(_) => 0,
                Expr::Var(_) => 1,
                Expr::Binary { lhs, rhs, .. } => expr_sites(lhs) + expr_sites(rhs) + 1,
                Expr::Call { name, args } => {
                    let inner: usize = args.iter().map(expr_sites).sum();
                    if Builtin::lookup(name).is_some() {
                        inner + 1
                    } else {
                        inner
                    }
                }
                Expr::Concat(args) => args.iter().map(expr_sites).sum::<usize>() + 1,
                Expr::Structure { value, .. } => expr_sites(value) + 1,
                Expr::Function { .. } => 0,
            }
        }
        fn stmt_sites(s: &Stmt) -> usize {
            match s {
                Stmt::Assign { value, .. } => expr_sites(value),
                Stmt::For { from, to, body, .. } => {
                    expr_sites(from)
                        + expr_sites(to)
                        + body.iter().map(stmt_sites).sum::<usize>()
                }
                Stmt::While { cond, body } => {
                    expr_sites(cond) + body.iter().map(stmt_sites).sum::<usize>()
                }
                Stmt::If { cond, then, els } => {
                    expr_sites(cond)
                        + then.iter().map(stmt_sites).sum::<usize>()
                        + els.as_ref().map_or(0, |e| e.iter().map(stmt_sites).sum())
                }
                Stmt::Expr(e) => expr_sites(e),
            }
        }
        params + body.iter().map(stmt_sites).sum::<usize>()
    }

    #[test]
    fn rsa_encrypt_sites_match_ast_walk_oracle() {
        let src = "\
p1 <- 971
p2 <- 383
n1 <- p1 * p2
e <- 17
encrypt <- function(msg) {
  p <- 1
  a1 <- msg
  for (i in 1:e) {
    p <- p * a1
    p <- p %% n1
  }
  p
}
encrypt(2L)
";
        let prog = parse(src).unwrap();
        let lp = lower(&prog).unwrap();
        let f = lp.function_named("encrypt").unwrap();
        let src_fn = prog.functions.iter().find(|f| f.name == "encrypt").unwrap();
        assert_eq!(
            f.record_sites.len(),
            expected_sites(src_fn.params.len(), &src_fn.body)
        );
        // loads of msg, p (x3), a1, n1, e; ops * and %%; param entry
        assert_eq!(f.record_sites.len(), 1 + 7 + 2);
    }

    #[test]
    fn pow_lowering_folds_constants_and_chains_variables() {
        let lp = lower_src("y <- 2^31 - 1\nx <- 1\nz <- x^3");
        let top = lp.function(TOP_LEVEL);
        // 2^31 - 1 folds to a single constant
        let c = top
            .consts
            .iter()
            .find(|c| c.scalar_f64() == Some(2147483647.0));
        assert!(c.is_some(), "folded constant missing: {:?}", top.consts);
        // x^3 becomes dup dup * * with a single record
        let code_s: Vec<String> = top.code.iter().map(|i| i.to_string()).collect();
        let pos = code_s.iter().position(|s| s == "dup").unwrap();
        assert_eq!(code_s[pos + 1], "dup");
        assert_eq!(code_s[pos + 2], "*");
        assert_eq!(code_s[pos + 3], "*");
        assert!(code_s[pos + 4].starts_with("record"));
    }

    #[test]
    fn lowering_is_deterministic() {
        let src = "f <- function(a, b) a + b * 2\nx <- f(1L, 2L)\n";
        let a = lower_src(src);
        let b = lower_src(src);
        for (fa, fb) in a.functions.iter().zip(b.functions.iter()) {
            assert_eq!(fa.code, fb.code);
            assert_eq!(fa.record_sites, fb.record_sites);
        }
        assert_eq!(a.global_names, b.global_names);
    }

    #[test]
    fn unresolvable_identifier_is_an_error() {
        let prog = parse("f <- function() nope + 1\nf()").unwrap();
        assert_eq!(lower(&prog).unwrap_err(), LoweringError::Unresolvable("nope".into()));
    }

    #[test]
    fn arity_checked_statically() {
        let prog = parse("f <- function(a) a\nf(1L, 2L)").unwrap();
        assert!(matches!(lower(&prog).unwrap_err(), LoweringError::ArityMismatch { .. }));
        let prog = parse("x <- length(1, 2)").unwrap();
        assert!(matches!(lower(&prog).unwrap_err(), LoweringError::ArityMismatch { .. }));
    }

    #[test]
    fn nested_function_literal_rejected() {
        let prog = parse("f <- function() { g <- function() 1L\n g() }").unwrap();
        assert_eq!(lower(&prog).unwrap_err(), LoweringError::NestedFunction);
    }

    #[test]
    fn superassign_targets_are_globals() {
        let lp = lower_src("inc <- function() count <<- count + 1\ncount <- 0L\ninc()");
        assert!(lp.global_slot("count").is_some());
        let inc = lp.function_named("inc").unwrap();
        assert!(inc.code.iter().any(|i| matches!(i, Instr::StGlobal(_))));
    }
}
