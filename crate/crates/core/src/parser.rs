//! Recursive-descent parser for the MiniDyn grammar.
//!
//! Statements extend greedily: a binary operator always continues the
//! current expression, so the grammar is insensitive to line breaks.
//! Top-level `name <- function(...)` statements are hoisted into the
//! program's function table.

use crate::ast::{BinOp, Expr, FunctionSource, Program, Stmt};
use crate::lexer::{tokenize, Pos, Spanned, SyntaxError, Tok};

pub fn parse(source: &str) -> Result<Program, SyntaxError> {
    let toks = tokenize(source)?;
    let mut p = Parser { toks, at: 0 };
    let stmts = p.parse_stmts_until(&Tok::Eof)?;
    p.expect(&Tok::Eof)?;
    hoist(stmts)
}

/// Splits top-level statements into hoisted function definitions and the
/// remaining top-level code.
fn hoist(stmts: Vec<Stmt>) -> Result<Program, SyntaxError> {
    let mut prog = Program::default();
    for stmt in stmts {
        match stmt {
            Stmt::Assign { name, superassign: false, value: Expr::Function { params, body } } => {
                if prog.functions.iter().any(|f| f.name == name) {
                    return Err(SyntaxError {
                        pos: Pos { line: 0, col: 0 },
                        message: format!("function `{name}` defined twice"),
                    });
                }
                prog.functions.push(FunctionSource { name, params, body });
            }
            other => prog.top_level.push(other),
        }
    }
    Ok(prog)
}

struct Parser {
    toks: Vec<Spanned>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].tok
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.at + 1).min(self.toks.len() - 1)].tok
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].pos
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].tok.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn expect(&mut self, want: &Tok) -> Result<(), SyntaxError> {
        if self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(self.err_expected(&[want.describe()]))
        }
    }

    fn err_expected(&self, expected: &[String]) -> SyntaxError {
        SyntaxError {
            pos: self.pos(),
            message: format!(
                "expected {}, found {}",
                expected.join(" or "),
                self.peek().describe()
            ),
        }
    }

    fn skip_semis(&mut self) {
        while *self.peek() == Tok::Semi {
            self.bump();
        }
    }

    fn parse_stmts_until(&mut self, end: &Tok) -> Result<Vec<Stmt>, SyntaxError> {
        let mut stmts = Vec::new();
        loop {
            self.skip_semis();
            if self.peek() == end || *self.peek() == Tok::Eof {
                break;
            }
            stmts.push(self.parse_stmt()?);
        }
        Ok(stmts)
    }

    fn parse_stmt(&mut self) -> Result<Stmt, SyntaxError> {
        match self.peek() {
            Tok::KwFor => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let var = self.parse_ident()?;
                self.expect(&Tok::KwIn)?;
                let from = self.parse_expr()?;
                self.expect(&Tok::Colon)?;
                let to = self.parse_expr()?;
                self.expect(&Tok::RParen)?;
                let body = self.parse_block()?;
                Ok(Stmt::For { var, from, to, body })
            }
            Tok::KwWhile => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let cond = self.parse_expr()?;
                self.expect(&Tok::RParen)?;
                let body = self.parse_block()?;
                Ok(Stmt::While { cond, body })
            }
            Tok::KwIf => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let cond = self.parse_expr()?;
                self.expect(&Tok::RParen)?;
                let then = self.parse_block()?;
                let els = if *self.peek() == Tok::KwElse {
                    self.bump();
                    Some(self.parse_block()?)
                } else {
                    None
                };
                Ok(Stmt::If { cond, then, els })
            }
            Tok::Ident(_)
                if *self.peek2() == Tok::Assign || *self.peek2() == Tok::SuperAssign =>
            {
                let name = self.parse_ident()?;
                let superassign = matches!(self.bump(), Tok::SuperAssign);
                let value = self.parse_expr()?;
                Ok(Stmt::Assign { name, superassign, value })
            }
            _ => Ok(Stmt::Expr(self.parse_expr()?)),
        }
    }

    fn parse_block(&mut self) -> Result<Vec<Stmt>, SyntaxError> {
        if *self.peek() == Tok::LBrace {
            self.bump();
            let stmts = self.parse_stmts_until(&Tok::RBrace)?;
            self.expect(&Tok::RBrace)?;
            Ok(stmts)
        } else {
            Ok(vec![self.parse_stmt()?])
        }
    }

    fn parse_ident(&mut self) -> Result<String, SyntaxError> {
        match self.peek().clone() {
            Tok::Ident(name) => {
                self.bump();
                Ok(name)
            }
            _ => Err(self.err_expected(&["identifier".to_string()])),
        }
    }

    fn parse_expr(&mut self) -> Result<Expr, SyntaxError> {
        self.parse_binary(0)
    }

    fn parse_binary(&mut self, min_prec: u8) -> Result<Expr, SyntaxError> {
        let mut lhs = self.parse_primary()?;
        loop {
            let (op, prec, right_assoc) = match self.peek() {
                Tok::Caret => (BinOp::Pow, 100, true),
                Tok::Percent2 => (BinOp::Mod, 80, false),
                Tok::Star => (BinOp::Mul, 70, false),
                Tok::Slash => (BinOp::Div, 70, false),
                Tok::Plus => (BinOp::Add, 60, false),
                Tok::Minus => (BinOp::Sub, 60, false),
                Tok::Lt => (BinOp::Lt, 50, false),
                Tok::Le => (BinOp::Le, 50, false),
                Tok::Gt => (BinOp::Gt, 50, false),
                Tok::Ge => (BinOp::Ge, 50, false),
                Tok::EqEq => (BinOp::Eq, 50, false),
                Tok::Ne => (BinOp::Ne, 50, false),
                _ => break,
            };
            if prec < min_prec {
                break;
            }
            self.bump();
            let next_min = if right_assoc { prec } else { prec + 1 };
            let rhs = self.parse_binary(next_min)?;
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) };
        }
        Ok(lhs)
    }

    fn parse_primary(&mut self) -> Result<Expr, SyntaxError> {
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(Expr::Int(v))
            }
            Tok::Dbl(v) => {
                self.bump();
                Ok(Expr::Dbl(v))
            }
            Tok::True => {
                self.bump();
                Ok(Expr::Lgl(true))
            }
            Tok::False => {
                self.bump();
                Ok(Expr::Lgl(false))
            }
            Tok::LParen => {
                self.bump();
                let e = self.parse_expr()?;
                self.expect(&Tok::RParen)?;
                Ok(e)
            }
            Tok::KwFunction => {
                self.bump();
                self.expect(&Tok::LParen)?;
                let mut params = Vec::new();
                if *self.peek() != Tok::RParen {
                    loop {
                        let p = self.parse_ident()?;
                        if params.contains(&p) {
                            return Err(SyntaxError {
                                pos: self.pos(),
                                message: format!("duplicate parameter `{p}`"),
                            });
                        }
                        params.push(p);
                        if *self.peek() == Tok::Comma {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                }
                self.expect(&Tok::RParen)?;
                let body = self.parse_block()?;
                Ok(Expr::Function { params, body })
            }
            Tok::Ident(name) => {
                self.bump();
                if *self.peek() == Tok::LParen {
                    self.bump();
                    match name.as_str() {
                        "structure" => {
                            let value = self.parse_expr()?;
                            self.expect(&Tok::Comma)?;
                            let key = self.parse_ident()?;
                            if key != "class" {
                                return Err(SyntaxError {
                                    pos: self.pos(),
                                    message: format!(
                                        "structure() only supports `class =`, found `{key}`"
                                    ),
                                });
                            }
                            self.expect(&Tok::Eq)?;
                            let class = match self.peek().clone() {
                                Tok::Str(s) if !s.is_empty() => {
                                    self.bump();
                                    s
                                }
                                Tok::Str(_) => {
                                    return Err(SyntaxError {
                                        pos: self.pos(),
                                        message: "class tag must be nonempty".into(),
                                    })
                                }
                                _ => return Err(self.err_expected(&["string".to_string()])),
                            };
                            self.expect(&Tok::RParen)?;
                            Ok(Expr::Structure { value: Box::new(value), class })
                        }
                        "c" => {
                            let mut args = vec![self.parse_expr()?];
                            while *self.peek() == Tok::Comma {
                                self.bump();
                                args.push(self.parse_expr()?);
                            }
                            self.expect(&Tok::RParen)?;
                            Ok(Expr::Concat(args))
                        }
                        _ => {
                            let mut args = Vec::new();
                            if *self.peek() != Tok::RParen {
                                loop {
                                    args.push(self.parse_expr()?);
                                    if *self.peek() == Tok::Comma {
                                        self.bump();
                                    } else {
                                        break;
                                    }
                                }
                            }
                            self.expect(&Tok::RParen)?;
                            Ok(Expr::Call { name, args })
                        }
                    }
                } else {
                    Ok(Expr::Var(name))
                }
            }
            _ => Err(self.err_expected(&[
                "a literal".to_string(),
                "identifier".to_string(),
                "`(`".to_string(),
                "`function`".to_string(),
            ])),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listing_one_parses_to_four_additions() {
        let prog = parse("f <- function() x+x+x+x+1L").unwrap();
        assert_eq!(prog.functions.len(), 1);
        let f = &prog.functions[0];
        assert_eq!(f.name, "f");
        assert!(f.params.is_empty());
        // body is one expression statement: ((((x+x)+x)+x)+1L)
        let mut adds = 0;
        fn count_adds(e: &Expr, n: &mut usize) {
            if let Expr::Binary { op: BinOp::Add, lhs, rhs } = e {
                *n += 1;
                count_adds(lhs, n);
                count_adds(rhs, n);
            }
        }
        match &f.body[0] {
            Stmt::Expr(e) => count_adds(e, &mut adds),
            other => panic!("unexpected body {other:?}"),
        }
        assert_eq!(adds, 4);
    }

    #[test]
    fn empty_source_is_empty_program() {
        let prog = parse("").unwrap();
        assert!(prog.functions.is_empty());
        assert!(prog.top_level.is_empty());
    }

    #[test]
    fn lcg_superassign_with_modulo() {
        let prog = parse(
            "lcg <- function(n) for (i in 1:n) state <<- (state * 48271) %% (2^31 - 1)",
        )
        .unwrap();
        let f = &prog.functions[0];
        match &f.body[0] {
            Stmt::For { body, .. } => match &body[0] {
                Stmt::Assign { name, superassign, value } => {
                    assert_eq!(name, "state");
                    assert!(superassign);
                    assert!(matches!(value, Expr::Binary { op: BinOp::Mod, .. }));
                }
                other => panic!("unexpected loop body {other:?}"),
            },
            other => panic!("unexpected body {other:?}"),
        }
    }

    #[test]
    fn modulo_binds_tighter_than_multiply() {
        let prog = parse("a * b %% m").unwrap();
        match &prog.top_level[0] {
            Stmt::Expr(Expr::Binary { op: BinOp::Mul, rhs, .. }) => {
                assert!(matches!(**rhs, Expr::Binary { op: BinOp::Mod, .. }));
            }
            other => panic!("unexpected parse {other:?}"),
        }
    }

    #[test]
    fn power_is_right_associative() {
        let prog = parse("a ^ b ^ cc").unwrap();
        match &prog.top_level[0] {
            Stmt::Expr(Expr::Binary { op: BinOp::Pow, rhs, .. }) => {
                assert!(matches!(**rhs, Expr::Binary { op: BinOp::Pow, .. }));
            }
            other => panic!("unexpected parse {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_position_and_expectation() {
        let err = parse("f <- function( {").unwrap_err();
        assert_eq!(err.pos.line, 1);
        assert!(err.message.contains("expected"));
    }

    #[test]
    fn structure_requires_class_key() {
        assert!(parse("structure(1, class = \"foo\")").is_ok());
        assert!(parse("structure(1, klass = \"foo\")").is_err());
        assert!(parse("structure(1, class = \"\")").is_err());
    }

    #[test]
    fn duplicate_function_definition_rejected() {
        assert!(parse("f <- function() 1L\nf <- function() 2L").is_err());
    }

    #[test]
    fn statements_split_greedily_without_newline_sensitivity() {
        let prog = parse("x <- 1L\ny <- x + 2L z <- y").unwrap();
        assert_eq!(prog.top_level.len(), 3);
    }
}
