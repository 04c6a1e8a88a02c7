//! Interpreter for the small RASP subset the string-edit tasks need:
//! `tokens` / `indices` / `length` primitives, integer affine expressions,
//! `select(keys, queries, EQ)`, `aggregate(selector, values)` and
//! elementwise `map` with an explicit lookup table.
//!
//! Programs are lists of assignments in a line-oriented dialect (see
//! [`parse`]); the value of the last assignment is the program output and
//! must be a token sequence. Evaluation is pure and exact, which is what
//! makes this module usable as the gold oracle for dataset generation and
//! for the compiled-weights equivalence checks.

mod parse;

pub use parse::{parse_program, print_expr, print_program, ParseError};

use crate::taskgen::TaskKind;
use crate::vocab::Token;
use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;
use thiserror::Error;

pub const COPY_PROGRAM_TEXT: &str = include_str!("../../programs/copy.rasp");
pub const FLIP_PROGRAM_TEXT: &str = include_str!("../../programs/flip.rasp");
pub const REVERSE_PROGRAM_TEXT: &str = include_str!("../../programs/reverse.rasp");

/// Comparison used by `select`. Only exact equality is needed here.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predicate {
    Eq,
}

impl Predicate {
    fn holds(self, query: f64, key: f64) -> bool {
        match self {
            Predicate::Eq => query == key,
        }
    }
}

/// Elementwise token lookup table with a stable entry order (used by the
/// pretty-printer).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LookupTable {
    entries: Vec<(Token, Token)>,
}

impl LookupTable {
    pub fn new(entries: Vec<(Token, Token)>) -> LookupTable {
        LookupTable { entries }
    }

    pub fn get(&self, key: Token) -> Option<Token> {
        self.entries.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    pub fn entries(&self) -> &[(Token, Token)] {
        &self.entries
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Tokens,
    Indices,
    Length,
    Int(i64),
    Var(String),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Select {
        keys: Box<Expr>,
        queries: Box<Expr>,
        pred: Predicate,
    },
    Aggregate {
        selector: Box<Expr>,
        values: Box<Expr>,
    },
    Map {
        table: LookupTable,
        values: Box<Expr>,
    },
}

/// A parsed, type-checked program: assignment lines evaluated in order, the
/// last line's value is the output.
#[derive(Clone, Debug, PartialEq)]
pub struct RaspProgram {
    pub lines: Vec<(String, Expr)>,
}

/// Value kinds, used both by the type checker and at runtime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    TokenSeq,
    NumSeq,
    Selector,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Kind::TokenSeq => "token sequence",
            Kind::NumSeq => "numeric sequence",
            Kind::Selector => "selector",
        };
        write!(f, "{name}")
    }
}

/// A boolean query-by-key pairing matrix; rows are query positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selector {
    n: usize,
    mask: Vec<bool>,
}

impl Selector {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Selector {
        let mut mask = Vec::with_capacity(n * n);
        for q in 0..n {
            for k in 0..n {
                mask.push(f(q, k));
            }
        }
        Selector { n, mask }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, query: usize, key: usize) -> bool {
        self.mask[query * self.n + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.mask[query * self.n..(query + 1) * self.n]
    }
}

/// A runtime sequence value: per-position tokens or per-position numbers.
/// Numeric sequences hold exact small integers (and means thereof).
#[derive(Clone, Debug, PartialEq)]
pub enum RaspValue {
    Tokens(Vec<Token>),
    Num(Vec<f64>),
    Sel(Selector),
}

impl RaspValue {
    pub fn kind(&self) -> Kind {
        match self {
            RaspValue::Tokens(_) => Kind::TokenSeq,
            RaspValue::Num(_) => Kind::NumSeq,
            RaspValue::Sel(_) => Kind::Selector,
        }
    }

    fn len(&self) -> usize {
        match self {
            RaspValue::Tokens(v) => v.len(),
            RaspValue::Num(v) => v.len(),
            RaspValue::Sel(s) => s.n,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RaspError {
    #[error("kind mismatch: expected {expected}, got {got}")]
    KindMismatch { expected: Kind, got: Kind },
    #[error("sequence length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("ambiguous aggregation: row {row} selects {selected} key(s), token aggregation needs exactly one")]
    AmbiguousAggregation { row: usize, selected: usize },
    #[error("lookup table has no entry for token {0:?}")]
    MissingLookup(String),
    #[error("unknown identifier {0:?}")]
    UnknownIdent(String),
    #[error("program output is a {0}, expected a token sequence")]
    OutputNotTokens(Kind),
    #[error("input token {0:?} outside the argument alphabet")]
    BadInputToken(String),
}

/// Boolean pairing of query and key positions under a predicate.
pub fn select(keys: &RaspValue, queries: &RaspValue, pred: Predicate) -> Result<Selector, RaspError> {
    let (ks, qs) = match (keys, queries) {
        (RaspValue::Num(k), RaspValue::Num(q)) => (k, q),
        (RaspValue::Num(_), other) | (other, _) => {
            return Err(RaspError::KindMismatch {
                expected: Kind::NumSeq,
                got: other.kind(),
            })
        }
    };
    if ks.len() != qs.len() {
        return Err(RaspError::LengthMismatch(ks.len(), qs.len()));
    }
    Ok(Selector::from_fn(ks.len(), |q, k| pred.holds(qs[q], ks[k])))
}

/// Moves values along a selector. Token sequences require exactly one
/// selected key per row; numeric sequences average the selected values
/// (an empty row contributes 0).
pub fn aggregate(sel: &Selector, vals: &RaspValue) -> Result<RaspValue, RaspError> {
    if sel.n() != vals.len() {
        return Err(RaspError::LengthMismatch(sel.n(), vals.len()));
    }
    match vals {
        RaspValue::Tokens(toks) => {
            let mut out = Vec::with_capacity(toks.len());
            for q in 0..sel.n() {
                let row = sel.row(q);
                let selected = row.iter().filter(|&&b| b).count();
                if selected != 1 {
                    return Err(RaspError::AmbiguousAggregation { row: q, selected });
                }
                let k = row.iter().position(|&b| b).unwrap();
                out.push(toks[k]);
            }
            Ok(RaspValue::Tokens(out))
        }
        RaspValue::Num(nums) => {
            let mut out = Vec::with_capacity(nums.len());
            for q in 0..sel.n() {
                let row = sel.row(q);
                let mut sum = 0.0;
                let mut count = 0usize;
                for (k, &b) in row.iter().enumerate() {
                    if b {
                        sum += nums[k];
                        count += 1;
                    }
                }
                out.push(if count == 0 { 0.0 } else { sum / count as f64 });
            }
            Ok(RaspValue::Num(out))
        }
        RaspValue::Sel(_) => Err(RaspError::KindMismatch {
            expected: Kind::TokenSeq,
            got: Kind::Selector,
        }),
    }
}

/// Applies a token lookup table elementwise.
pub fn map_elem(table: &LookupTable, vals: &RaspValue) -> Result<RaspValue, RaspError> {
    match vals {
        RaspValue::Tokens(toks) => {
            let mut out = Vec::with_capacity(toks.len());
            for &t in toks {
                match table.get(t) {
                    Some(v) => out.push(v),
                    None => return Err(RaspError::MissingLookup(t.as_str().to_string())),
                }
            }
            Ok(RaspValue::Tokens(out))
        }
        other => Err(RaspError::KindMismatch {
            expected: Kind::TokenSeq,
            got: other.kind(),
        }),
    }
}

fn eval_expr(expr: &Expr, env: &HashMap<String, RaspValue>, n: usize, input: &[Token]) -> Result<RaspValue, RaspError> {
    match expr {
        Expr::Tokens => Ok(RaspValue::Tokens(input.to_vec())),
        Expr::Indices => Ok(RaspValue::Num((0..n).map(|i| i as f64).collect())),
        Expr::Length => Ok(RaspValue::Num(vec![n as f64; n])),
        Expr::Int(c) => Ok(RaspValue::Num(vec![*c as f64; n])),
        Expr::Var(name) => env
            .get(name)
            .cloned()
            .ok_or_else(|| RaspError::UnknownIdent(name.clone())),
        Expr::Add(a, b) | Expr::Sub(a, b) => {
            let va = eval_expr(a, env, n, input)?;
            let vb = eval_expr(b, env, n, input)?;
            let (xa, xb) = match (&va, &vb) {
                (RaspValue::Num(x), RaspValue::Num(y)) => (x, y),
                (RaspValue::Num(_), other) | (other, _) => {
                    return Err(RaspError::KindMismatch {
                        expected: Kind::NumSeq,
                        got: other.kind(),
                    })
                }
            };
            if xa.len() != xb.len() {
                return Err(RaspError::LengthMismatch(xa.len(), xb.len()));
            }
            let out = xa
                .iter()
                .zip(xb)
                .map(|(p, q)| if matches!(expr, Expr::Add(..)) { p + q } else { p - q })
                .collect();
            Ok(RaspValue::Num(out))
        }
        Expr::Select { keys, queries, pred } => {
            let vk = eval_expr(keys, env, n, input)?;
            let vq = eval_expr(queries, env, n, input)?;
            Ok(RaspValue::Sel(select(&vk, &vq, *pred)?))
        }
        Expr::Aggregate { selector, values } => {
            let vs = eval_expr(selector, env, n, input)?;
            let vv = eval_expr(values, env, n, input)?;
            match vs {
                RaspValue::Sel(sel) => aggregate(&sel, &vv),
                other => Err(RaspError::KindMismatch {
                    expected: Kind::Selector,
                    got: other.kind(),
                }),
            }
        }
        Expr::Map { table, values } => {
            let vv = eval_expr(values, env, n, input)?;
            map_elem(table, &vv)
        }
    }
}

/// Runs a program on an `{a, b}` input sequence.
pub fn run_program(prog: &RaspProgram, input: &[Token]) -> Result<Vec<Token>, RaspError> {
    for t in input {
        if !t.is_letter() {
            return Err(RaspError::BadInputToken(t.as_str().to_string()));
        }
    }
    let n = input.len();
    let mut env: HashMap<String, RaspValue> = HashMap::new();
    let mut last: Option<RaspValue> = None;
    for (name, expr) in &prog.lines {
        let value = eval_expr(expr, &env, n, input)?;
        env.insert(name.clone(), value.clone());
        last = Some(value);
    }
    match last {
        Some(RaspValue::Tokens(out)) => Ok(out),
        Some(other) => Err(RaspError::OutputNotTokens(other.kind())),
        None => Ok(Vec::new()),
    }
}

/// The reference program for a task, parsed once from the bundled listing.
pub fn builtin_program(kind: TaskKind) -> &'static RaspProgram {
    static COPY: OnceLock<RaspProgram> = OnceLock::new();
    static FLIP: OnceLock<RaspProgram> = OnceLock::new();
    static REVERSE: OnceLock<RaspProgram> = OnceLock::new();
    let (cell, text) = match kind {
        TaskKind::Copy => (&COPY, COPY_PROGRAM_TEXT),
        TaskKind::Flip => (&FLIP, FLIP_PROGRAM_TEXT),
        TaskKind::Reverse => (&REVERSE, REVERSE_PROGRAM_TEXT),
    };
    cell.get_or_init(|| parse_program(text).expect("bundled program parses"))
}
