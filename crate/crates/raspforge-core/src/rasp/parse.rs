//! Front-end for the line-oriented program dialect.
//!
//! Grammar (one assignment per line, `#` starts a comment):
//!
//! ```text
//! program := line*
//! line    := ident '=' expr
//! expr    := term (('+' | '-') term)*
//! term    := 'tokens' | 'indices' | 'length' | integer | ident
//!          | 'select' '(' expr ',' expr ',' 'EQ' ')'
//!          | 'aggregate' '(' expr ',' expr ')'
//!          | 'map' '(' table ',' expr ')'
//!          | '(' expr ')'
//! table   := '{' [ token ':' token (',' token ':' token)* ] '}'
//! ```
//!
//! Parsing also type-checks: `select` needs numeric operands, `aggregate`
//! needs a selector plus a sequence, `map` needs a token sequence, and the
//! final assignment must produce a token sequence.

use super::{Expr, Kind, LookupTable, Predicate, RaspProgram};
use crate::vocab::Token;
use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("type error at line {line}: {msg}")]
    Type { line: usize, msg: String },
    #[error("program has no assignment lines")]
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Plus,
    Minus,
    Equals,
    LParen,
    RParen,
    LBrace,
    RBrace,
    Colon,
    Comma,
}

struct Lexer<'a> {
    src: &'a str,
    line_no: usize,
    toks: Vec<(Tok, usize)>, // (token, column)
}

fn lex_line(src: &str, line_no: usize) -> Result<Vec<(Tok, usize)>, ParseError> {
    let mut toks = Vec::new();
    let bytes: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let col = i + 1;
        match c {
            '#' => break,
            c if c.is_whitespace() => {
                i += 1;
            }
            '+' => {
                toks.push((Tok::Plus, col));
                i += 1;
            }
            '-' => {
                toks.push((Tok::Minus, col));
                i += 1;
            }
            '=' => {
                toks.push((Tok::Equals, col));
                i += 1;
            }
            '(' => {
                toks.push((Tok::LParen, col));
                i += 1;
            }
            ')' => {
                toks.push((Tok::RParen, col));
                i += 1;
            }
            '{' => {
                toks.push((Tok::LBrace, col));
                i += 1;
            }
            '}' => {
                toks.push((Tok::RBrace, col));
                i += 1;
            }
            ':' => {
                toks.push((Tok::Colon, col));
                i += 1;
            }
            ',' => {
                toks.push((Tok::Comma, col));
                i += 1;
            }
            c if c.is_ascii_digit() => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let text: String = bytes[start..i].iter().collect();
                let value = text.parse::<i64>().map_err(|_| ParseError::Syntax {
                    line: line_no,
                    col,
                    msg: format!("integer literal {text:?} out of range"),
                })?;
                toks.push((Tok::Int(value), col));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == '_') {
                    i += 1;
                }
                toks.push((Tok::Ident(bytes[start..i].iter().collect()), col));
            }
            other => {
                return Err(ParseError::Syntax {
                    line: line_no,
                    col,
                    msg: format!("unexpected character {other:?}"),
                })
            }
        }
    }
    Ok(toks)
}

impl<'a> Lexer<'a> {
    fn peek(&self, pos: usize) -> Option<&Tok> {
        self.toks.get(pos).map(|(t, _)| t)
    }

    fn col(&self, pos: usize) -> usize {
        self.toks
            .get(pos)
            .map(|(_, c)| *c)
            .unwrap_or_else(|| self.src.chars().count() + 1)
    }

    fn err(&self, pos: usize, msg: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            line: self.line_no,
            col: self.col(pos),
            msg: msg.into(),
        }
    }

    fn expect(&self, pos: usize, want: &Tok, what: &str) -> Result<usize, ParseError> {
        match self.peek(pos) {
            Some(t) if t == want => Ok(pos + 1),
            Some(t) => Err(self.err(pos, format!("expected {what}, found {t:?}"))),
            None => Err(self.err(pos, format!("expected {what}, found end of line"))),
        }
    }
}

fn parse_token_name(lx: &Lexer, pos: usize) -> Result<(Token, usize), ParseError> {
    match lx.peek(pos) {
        Some(Tok::Ident(name)) => {
            let tok = Token::parse(name)
                .map_err(|_| lx.err(pos, format!("unknown token name {name:?} in lookup table")))?;
            Ok((tok, pos + 1))
        }
        Some(Tok::Minus) => Ok((Token::Dash, pos + 1)),
        other => Err(lx.err(pos, format!("expected a token name, found {other:?}"))),
    }
}

fn parse_table(lx: &Lexer, mut pos: usize) -> Result<(LookupTable, usize), ParseError> {
    pos = lx.expect(pos, &Tok::LBrace, "'{'")?;
    let mut entries = Vec::new();
    if lx.peek(pos) == Some(&Tok::RBrace) {
        return Ok((LookupTable::new(entries), pos + 1));
    }
    loop {
        let (key, next) = parse_token_name(lx, pos)?;
        pos = lx.expect(next, &Tok::Colon, "':'")?;
        let (value, next) = parse_token_name(lx, pos)?;
        pos = next;
        entries.push((key, value));
        match lx.peek(pos) {
            Some(Tok::Comma) => pos += 1,
            Some(Tok::RBrace) => return Ok((LookupTable::new(entries), pos + 1)),
            other => return Err(lx.err(pos, format!("expected ',' or '}}', found {other:?}"))),
        }
    }
}

fn parse_term(lx: &Lexer, pos: usize) -> Result<(Expr, usize), ParseError> {
    match lx.peek(pos) {
        Some(Tok::Int(v)) => Ok((Expr::Int(*v), pos + 1)),
        Some(Tok::LParen) => {
            let (inner, next) = parse_expr(lx, pos + 1)?;
            let next = lx.expect(next, &Tok::RParen, "')'")?;
            Ok((inner, next))
        }
        Some(Tok::Ident(name)) => match name.as_str() {
            "tokens" => Ok((Expr::Tokens, pos + 1)),
            "indices" => Ok((Expr::Indices, pos + 1)),
            "length" => Ok((Expr::Length, pos + 1)),
            "select" => {
                let mut p = lx.expect(pos + 1, &Tok::LParen, "'('")?;
                let (keys, next) = parse_expr(lx, p)?;
                p = lx.expect(next, &Tok::Comma, "','")?;
                let (queries, next) = parse_expr(lx, p)?;
                p = lx.expect(next, &Tok::Comma, "','")?;
                match lx.peek(p) {
                    Some(Tok::Ident(pred)) if pred == "EQ" => {}
                    other => return Err(lx.err(p, format!("expected predicate EQ, found {other:?}"))),
                }
                let next = lx.expect(p + 1, &Tok::RParen, "')'")?;
                Ok((
                    Expr::Select {
                        keys: Box::new(keys),
                        queries: Box::new(queries),
                        pred: Predicate::Eq,
                    },
                    next,
                ))
            }
            "aggregate" => {
                let p = lx.expect(pos + 1, &Tok::LParen, "'('")?;
                let (selector, next) = parse_expr(lx, p)?;
                let p = lx.expect(next, &Tok::Comma, "','")?;
                let (values, next) = parse_expr(lx, p)?;
                let next = lx.expect(next, &Tok::RParen, "')'")?;
                Ok((
                    Expr::Aggregate {
                        selector: Box::new(selector),
                        values: Box::new(values),
                    },
                    next,
                ))
            }
            "map" => {
                let p = lx.expect(pos + 1, &Tok::LParen, "'('")?;
                let (table, next) = parse_table(lx, p)?;
                let p = lx.expect(next, &Tok::Comma, "','")?;
                let (values, next) = parse_expr(lx, p)?;
                let next = lx.expect(next, &Tok::RParen, "')'")?;
                Ok((
                    Expr::Map {
                        table,
                        values: Box::new(values),
                    },
                    next,
                ))
            }
            _ => Ok((Expr::Var(name.clone()), pos + 1)),
        },
        other => Err(lx.err(pos, format!("expected an expression, found {other:?}"))),
    }
}

fn parse_expr(lx: &Lexer, pos: usize) -> Result<(Expr, usize), ParseError> {
    let (mut acc, mut pos) = parse_term(lx, pos)?;
    loop {
        match lx.peek(pos) {
            Some(Tok::Plus) => {
                let (rhs, next) = parse_term(lx, pos + 1)?;
                acc = Expr::Add(Box::new(acc), Box::new(rhs));
                pos = next;
            }
            Some(Tok::Minus) => {
                let (rhs, next) = parse_term(lx, pos + 1)?;
                acc = Expr::Sub(Box::new(acc), Box::new(rhs));
                pos = next;
            }
            _ => return Ok((acc, pos)),
        }
    }
}

fn check_kind(expr: &Expr, env: &HashMap<String, Kind>, line: usize) -> Result<Kind, ParseError> {
    let type_err = |msg: String| ParseError::Type { line, msg };
    match expr {
        Expr::Tokens => Ok(Kind::TokenSeq),
        Expr::Indices | Expr::Length | Expr::Int(_) => Ok(Kind::NumSeq),
        Expr::Var(name) => env
            .get(name)
            .copied()
            .ok_or_else(|| type_err(format!("unknown identifier {name:?}"))),
        Expr::Add(a, b) | Expr::Sub(a, b) => {
            for side in [a, b] {
                let k = check_kind(side, env, line)?;
                if k != Kind::NumSeq {
                    return Err(type_err(format!(
                        "arithmetic needs numeric sequences, found {k} in {}",
                        print_expr(side)
                    )));
                }
            }
            Ok(Kind::NumSeq)
        }
        Expr::Select { keys, queries, .. } => {
            for (role, side) in [("keys", keys), ("queries", queries)] {
                let k = check_kind(side, env, line)?;
                if k != Kind::NumSeq {
                    return Err(type_err(format!(
                        "select {role} must be a numeric sequence, found {k} in {}",
                        print_expr(side)
                    )));
                }
            }
            Ok(Kind::Selector)
        }
        Expr::Aggregate { selector, values } => {
            let ks = check_kind(selector, env, line)?;
            if ks != Kind::Selector {
                return Err(type_err(format!(
                    "aggregate needs a selector, found {ks} in {}",
                    print_expr(selector)
                )));
            }
            let kv = check_kind(values, env, line)?;
            if kv == Kind::Selector {
                return Err(type_err("aggregate values must be a sequence, found selector".into()));
            }
            Ok(kv)
        }
        Expr::Map { values, .. } => {
            let kv = check_kind(values, env, line)?;
            if kv != Kind::TokenSeq {
                return Err(type_err(format!("map applies to token sequences, found {kv}")));
            }
            Ok(Kind::TokenSeq)
        }
    }
}

/// Parses and type-checks a program listing.
pub fn parse_program(text: &str) -> Result<RaspProgram, ParseError> {
    let mut lines = Vec::new();
    let mut env: HashMap<String, Kind> = HashMap::new();
    let mut last_kind = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let toks = lex_line(raw, line_no)?;
        if toks.is_empty() {
            continue;
        }
        let lx = Lexer {
            src: raw,
            line_no,
            toks,
        };
        let name = match lx.peek(0) {
            Some(Tok::Ident(name)) => name.clone(),
            other => return Err(lx.err(0, format!("expected an identifier, found {other:?}"))),
        };
        let pos = lx.expect(1, &Tok::Equals, "'='")?;
        let (expr, end) = parse_expr(&lx, pos)?;
        if end != lx.toks.len() {
            return Err(lx.err(end, "trailing input after expression"));
        }
        let kind = check_kind(&expr, &env, line_no)?;
        env.insert(name.clone(), kind);
        last_kind = Some((kind, line_no));
        lines.push((name, expr));
    }
    match last_kind {
        None => Err(ParseError::Empty),
        Some((Kind::TokenSeq, _)) => Ok(RaspProgram { lines }),
        Some((kind, line)) => Err(ParseError::Type {
            line,
            msg: format!("program output must be a token sequence, found {kind}"),
        }),
    }
}

/// Renders one expression in the surface syntax.
pub fn print_expr(expr: &Expr) -> String {
    match expr {
        Expr::Tokens => "tokens".into(),
        Expr::Indices => "indices".into(),
        Expr::Length => "length".into(),
        Expr::Int(v) => v.to_string(),
        Expr::Var(name) => name.clone(),
        Expr::Add(a, b) => format!("{} + {}", print_expr(a), print_term(b)),
        Expr::Sub(a, b) => format!("{} - {}", print_expr(a), print_term(b)),
        Expr::Select { keys, queries, pred: _ } => {
            format!("select({}, {}, EQ)", print_expr(keys), print_expr(queries))
        }
        Expr::Aggregate { selector, values } => {
            format!("aggregate({}, {})", print_expr(selector), print_expr(values))
        }
        Expr::Map { table, values } => {
            let mut entries = String::new();
            for (i, (k, v)) in table.entries().iter().enumerate() {
                if i > 0 {
                    entries.push_str(", ");
                }
                let _ = write!(entries, "{}: {}", k.as_str(), v.as_str());
            }
            format!("map({{{entries}}}, {})", print_expr(values))
        }
    }
}

// Right operand of +/-: parenthesize nested sums so printing re-parses to
// the same left-associated tree.
fn print_term(expr: &Expr) -> String {
    match expr {
        Expr::Add(..) | Expr::Sub(..) => format!("({})", print_expr(expr)),
        _ => print_expr(expr),
    }
}

/// Pretty-prints a program; `parse(print(parse(t))) == parse(t)`.
pub fn print_program(prog: &RaspProgram) -> String {
    let mut out = String::new();
    for (name, expr) in &prog.lines {
        let _ = writeln!(out, "{name} = {}", print_expr(expr));
    }
    out
}
