//! Tokenizer for MiniDyn source. Whitespace and `#` comments are
//! skipped; `;` separates statements.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Int(i32),
    Dbl(f64),
    Ident(String),
    Str(String),
    True,
    False,
    KwFor,
    KwIn,
    KwWhile,
    KwIf,
    KwElse,
    KwFunction,
    Assign,      // <-
    SuperAssign, // <<-
    Eq,          // =
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    Colon,
    Semi,
    Plus,
    Minus,
    Star,
    Slash,
    Percent2, // %%
    Caret,
    Lt,
    Le,
    Gt,
    Ge,
    EqEq,
    Ne,
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Int(v) => format!("integer literal {v}L"),
            Tok::Dbl(v) => format!("numeric literal {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Str(s) => format!("string \"{s}\""),
            Tok::True => "TRUE".into(),
            Tok::False => "FALSE".into(),
            Tok::KwFor => "`for`".into(),
            Tok::KwIn => "`in`".into(),
            Tok::KwWhile => "`while`".into(),
            Tok::KwIf => "`if`".into(),
            Tok::KwElse => "`else`".into(),
            Tok::KwFunction => "`function`".into(),
            Tok::Assign => "`<-`".into(),
            Tok::SuperAssign => "`<<-`".into(),
            Tok::Eq => "`=`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Semi => "`;`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Percent2 => "`%%`".into(),
            Tok::Caret => "`^`".into(),
            Tok::Lt => "`<`".into(),
            Tok::Le => "`<=`".into(),
            Tok::Gt => "`>`".into(),
            Tok::Ge => "`>=`".into(),
            Tok::EqEq => "`==`".into(),
            Tok::Ne => "`!=`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone)]
pub struct Spanned {
    pub tok: Tok,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("syntax error at {pos}: {message}")]
pub struct SyntaxError {
    pub pos: Pos,
    pub message: String,
}

pub fn tokenize(src: &str) -> Result<Vec<Spanned>, SyntaxError> {
    let mut out = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0usize;
    let mut line = 1u32;
    let mut col = 1u32;

    macro_rules! push {
        ($tok:expr, $pos:expr) => {
            out.push(Spanned { tok: $tok, pos: $pos })
        };
    }

    while i < bytes.len() {
        let c = bytes[i] as char;
        let pos = Pos { line, col };
        match c {
            '\n' => {
                i += 1;
                line += 1;
                col = 1;
            }
            ' ' | '\t' | '\r' => {
                i += 1;
                col += 1;
            }
            '#' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            '(' => {
                push!(Tok::LParen, pos);
                i += 1;
                col += 1;
            }
            ')' => {
                push!(Tok::RParen, pos);
                i += 1;
                col += 1;
            }
            '{' => {
                push!(Tok::LBrace, pos);
                i += 1;
                col += 1;
            }
            '}' => {
                push!(Tok::RBrace, pos);
                i += 1;
                col += 1;
            }
            ',' => {
                push!(Tok::Comma, pos);
                i += 1;
                col += 1;
            }
            ':' => {
                push!(Tok::Colon, pos);
                i += 1;
                col += 1;
            }
            ';' => {
                push!(Tok::Semi, pos);
                i += 1;
                col += 1;
            }
            '+' => {
                push!(Tok::Plus, pos);
                i += 1;
                col += 1;
            }
            '-' => {
                push!(Tok::Minus, pos);
                i += 1;
                col += 1;
            }
            '*' => {
                push!(Tok::Star, pos);
                i += 1;
                col += 1;
            }
            '/' => {
                push!(Tok::Slash, pos);
                i += 1;
                col += 1;
            }
            '^' => {
                push!(Tok::Caret, pos);
                i += 1;
                col += 1;
            }
            '%' => {
                if i + 1 < bytes.len() && bytes[i + 1] == b'%' {
                    push!(Tok::Percent2, pos);
                    i += 2;
                    col += 2;
                } else {
                    return Err(SyntaxError { pos, message: "expected `%%`".into() });
                }
            }
            '<' => {
                if src[i..].starts_with("<<-") {
                    push!(Tok::SuperAssign, pos);
                    i += 3;
                    col += 3;
                } else if src[i..].starts_with("<-") {
                    push!(Tok::Assign, pos);
                    i += 2;
                    col += 2;
                } else if src[i..].starts_with("<=") {
                    push!(Tok::Le, pos);
                    i += 2;
                    col += 2;
                } else {
                    push!(Tok::Lt, pos);
                    i += 1;
                    col += 1;
                }
            }
            '>' => {
                if src[i..].starts_with(">=") {
                    push!(Tok::Ge, pos);
                    i += 2;
                    col += 2;
                } else {
                    push!(Tok::Gt, pos);
                    i += 1;
                    col += 1;
                }
            }
            '=' => {
                if src[i..].starts_with("==") {
                    push!(Tok::EqEq, pos);
                    i += 2;
                    col += 2;
                } else {
                    push!(Tok::Eq, pos);
                    i += 1;
                    col += 1;
                }
            }
            '!' => {
                if src[i..].starts_with("!=") {
                    push!(Tok::Ne, pos);
                    i += 2;
                    col += 2;
                } else {
                    return Err(SyntaxError { pos, message: "expected `!=`".into() });
                }
            }
            '"' => {
                let start = i + 1;
                let mut j = start;
                while j < bytes.len() && bytes[j] != b'"' && bytes[j] != b'\n' {
                    j += 1;
                }
                if j >= bytes.len() || bytes[j] != b'"' {
                    return Err(SyntaxError { pos, message: "unterminated string".into() });
                }
                push!(Tok::Str(src[start..j].to_string()), pos);
                col += (j + 1 - i) as u32;
                i = j + 1;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                let mut j = i;
                while j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                    j += 1;
                }
                let mut is_float = false;
                if j < bytes.len() && bytes[j] == b'.' {
                    is_float = true;
                    j += 1;
                    while j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        j += 1;
                    }
                }
                if j < bytes.len() && (bytes[j] == b'e' || bytes[j] == b'E') {
                    let mut k = j + 1;
                    if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                        k += 1;
                    }
                    if k < bytes.len() && (bytes[k] as char).is_ascii_digit() {
                        is_float = true;
                        j = k;
                        while j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                            j += 1;
                        }
                    }
                }
                let text = &src[start..j];
                if text == "." {
                    return Err(SyntaxError { pos, message: "stray `.`".into() });
                }
                if !is_float && j < bytes.len() && bytes[j] == b'L' {
                    // integer literal
                    let v: i64 = text
                        .parse()
                        .map_err(|_| SyntaxError { pos, message: "bad integer literal".into() })?;
                    if v > i32::MAX as i64 {
                        return Err(SyntaxError {
                            pos,
                            message: "integer literal out of range".into(),
                        });
                    }
                    push!(Tok::Int(v as i32), pos);
                    j += 1;
                } else {
                    let v: f64 = text
                        .parse()
                        .map_err(|_| SyntaxError { pos, message: "bad numeric literal".into() })?;
                    push!(Tok::Dbl(v), pos);
                }
                col += (j - i) as u32;
                i = j;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                let mut j = i;
                while j < bytes.len() {
                    let cj = bytes[j] as char;
                    if cj.is_ascii_alphanumeric() || cj == '_' || cj == '.' {
                        j += 1;
                    } else {
                        break;
                    }
                }
                let word = &src[start..j];
                let tok = match word {
                    "for" => Tok::KwFor,
                    "in" => Tok::KwIn,
                    "while" => Tok::KwWhile,
                    "if" => Tok::KwIf,
                    "else" => Tok::KwElse,
                    "function" => Tok::KwFunction,
                    "TRUE" => Tok::True,
                    "FALSE" => Tok::False,
                    _ => Tok::Ident(word.to_string()),
                };
                push!(tok, pos);
                col += (j - i) as u32;
                i = j;
            }
            other => {
                return Err(SyntaxError { pos, message: format!("unexpected character `{other}`") });
            }
        }
    }
    out.push(Spanned { tok: Tok::Eof, pos: Pos { line, col } });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_and_suffixes() {
        let toks = tokenize("1L 1 2.5 1e7 2e-3 10L").unwrap();
        let kinds: Vec<_> = toks.iter().map(|t| t.tok.clone()).collect();
        assert_eq!(
            kinds,
            vec![
                Tok::Int(1),
                Tok::Dbl(1.0),
                Tok::Dbl(2.5),
                Tok::Dbl(1e7),
                Tok::Dbl(2e-3),
                Tok::Int(10),
                Tok::Eof
            ]
        );
    }

    #[test]
    fn assignment_operators() {
        let toks = tokenize("x <- 1 y <<- 2 a < b a <= b").unwrap();
        let has = |t: &Tok| toks.iter().any(|s| s.tok == *t);
        assert!(has(&Tok::Assign));
        assert!(has(&Tok::SuperAssign));
        assert!(has(&Tok::Lt));
        assert!(has(&Tok::Le));
    }

    #[test]
    fn comments_and_positions() {
        let toks = tokenize("x # comment\ny").unwrap();
        assert_eq!(toks[0].pos, Pos { line: 1, col: 1 });
        assert_eq!(toks[1].pos, Pos { line: 2, col: 1 });
    }
}
