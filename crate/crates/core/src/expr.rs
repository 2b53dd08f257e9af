//! A small expression language for integrands `F(k, x, y, u)`.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | var | func '(' expr ')' | '(' expr ')'
//! var     := 'k' | 'x' | 'y' | 'u'
//! func    := 'sin' | 'cos' | 'exp' | 'log' | 'sqrt' | 'abs' | 'tanh'
//! ```
//!
//! `^` binds tighter than unary minus and associates to the right, so
//! `-x^2` is `-(x^2)` and `2^3^2` is `2^(3^2)`. A minus sign directly in front
//! of a numeric literal is folded into the literal.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Var {
    K,
    X,
    Y,
    U,
}

impl Var {
    pub fn name(self) -> &'static str {
        match self {
            Var::K => "k",
            Var::X => "x",
            Var::Y => "y",
            Var::U => "u",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
}

impl Func {
    pub const ALL: [Func; 7] =
        [Func::Sin, Func::Cos, Func::Exp, Func::Log, Func::Sqrt, Func::Abs, Func::Tanh];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier '{name}' at offset {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("function '{name}' at offset {offset} takes exactly one argument, got {got}")]
    Arity { offset: usize, name: String, got: usize },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. }
            | ParseError::UnknownIdentifier { offset, .. }
            | ParseError::Arity { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("domain error: {reason} in '{subexpr}'")]
pub struct EvalError {
    pub reason: String,
    pub subexpr: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("'{subexpr}' is not differentiable with respect to {var}")]
pub struct DiffError {
    pub var: &'static str,
    pub subexpr: String,
}

/// Values of the four expression variables.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Env {
    pub k: f64,
    pub x: f64,
    pub y: f64,
    pub u: f64,
}

impl Env {
    pub fn new(k: f64, x: f64, y: f64, u: f64) -> Self {
        Self { k, x, y, u }
    }

    fn get(&self, v: Var) -> f64 {
        match v {
            Var::K => self.k,
            Var::X => self.x,
            Var::Y => self.y,
            Var::U => self.u,
        }
    }

    #[cfg(test)]
    fn with(mut self, v: Var, value: f64) -> Self {
        match v {
            Var::K => self.k = value,
            Var::X => self.x = value,
            Var::Y => self.y = value,
            Var::U => self.u = value,
        }
        self
    }
}

// ---------------------------------------------------------------------------
// lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'0'..=b'9' | b'.' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let lit = &text[start..i];
                let value = lit.parse::<f64>().map_err(|_| ParseError::Syntax {
                    offset: start,
                    message: format!("malformed number '{lit}'"),
                })?;
                out.push((start, Tok::Num(value)));
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Tok::Ident(text[start..i].to_string())));
            }
            b'+' | b'-' | b'*' | b'/' | b'^' => {
                out.push((i, Tok::Op(c as char)));
                i += 1;
            }
            b'(' => {
                out.push((i, Tok::LParen));
                i += 1;
            }
            b')' => {
                out.push((i, Tok::RParen));
                i += 1;
            }
            b',' => {
                out.push((i, Tok::Comma));
                i += 1;
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    offset: i,
                    message: format!("unexpected character '{ch}'"),
                });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// parser

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(o, _)| *o).unwrap_or(0)
    }

    /// An operand was expected; at end of input the error points at the
    /// dangling token that demanded it.
    fn missing_operand(&self) -> ParseError {
        match self.toks.get(self.pos) {
            Some((offset, tok)) => ParseError::Syntax {
                offset: *offset,
                message: format!("expected an operand, found {}", describe(tok)),
            },
            None => ParseError::Syntax {
                offset: self.pos.checked_sub(1).map(|p| self.toks[p].0).unwrap_or(0),
                message: "unexpected end of input".to_string(),
            },
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if let Some(Tok::Op('-')) = self.peek() {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(match inner {
                Expr::Num(v) => Expr::Num(-v),
                other => Expr::Neg(Box::new(other)),
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        let tok = match self.toks.get(self.pos) {
            Some((_, t)) => t.clone(),
            None => return Err(self.missing_operand()),
        };
        match tok {
            Tok::Num(v) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect_rparen(offset)?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.pos += 1;
                match name.as_str() {
                    "k" => return Ok(Expr::Var(Var::K)),
                    "x" => return Ok(Expr::Var(Var::X)),
                    "y" => return Ok(Expr::Var(Var::Y)),
                    "u" => return Ok(Expr::Var(Var::U)),
                    _ => {}
                }
                let func = Func::from_name(&name)
                    .ok_or(ParseError::UnknownIdentifier { offset, name: name.clone() })?;
                match self.peek() {
                    Some(Tok::LParen) => self.pos += 1,
                    _ => {
                        return Err(ParseError::Syntax {
                            offset: self.offset_or_end(),
                            message: format!("expected '(' after '{name}'"),
                        })
                    }
                }
                if let Some(Tok::RParen) = self.peek() {
                    return Err(ParseError::Arity { offset, name, got: 0 });
                }
                let arg = self.expr()?;
                let mut extra = 0;
                while let Some(Tok::Comma) = self.peek() {
                    self.pos += 1;
                    self.expr()?;
                    extra += 1;
                }
                if extra > 0 {
                    return Err(ParseError::Arity { offset, name, got: 1 + extra });
                }
                self.expect_rparen(offset)?;
                Ok(Expr::Call(func, Box::new(arg)))
            }
            _ => Err(self.missing_operand()),
        }
    }

    fn offset_or_end(&self) -> usize {
        match self.toks.get(self.pos) {
            Some((o, _)) => *o,
            None => self.toks.last().map(|(o, _)| *o).unwrap_or(0),
        }
    }

    fn expect_rparen(&mut self, open: usize) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::RParen) => {
                self.pos += 1;
                Ok(())
            }
            Some(tok) => Err(ParseError::Syntax {
                offset: self.offset(),
                message: format!("expected ')', found {}", describe(tok)),
            }),
            None => Err(ParseError::Syntax {
                offset: open,
                message: "unclosed '('".to_string(),
            }),
        }
    }
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Num(v) => format!("number {v}"),
        Tok::Ident(s) => format!("identifier '{s}'"),
        Tok::Op(c) => format!("'{c}'"),
        Tok::LParen => "'('".to_string(),
        Tok::RParen => "')'".to_string(),
        Tok::Comma => "','".to_string(),
    }
}

pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let toks = lex(text)?;
    if toks.is_empty() {
        return Err(ParseError::Syntax { offset: 0, message: "empty expression".to_string() });
    }
    let mut p = Parser { toks, pos: 0 };
    let e = p.expr()?;
    if p.pos < p.toks.len() {
        let (offset, tok) = &p.toks[p.pos];
        return Err(ParseError::Syntax {
            offset: *offset,
            message: format!("unexpected {}", describe(tok)),
        });
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// smart constructors with identity/annihilator folding

fn num_of(e: &Expr) -> Option<f64> {
    match e {
        Expr::Num(v) => Some(*v),
        _ => None,
    }
}

pub fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => Expr::Num(-v),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

pub fn add(a: Expr, b: Expr) -> Expr {
    match (num_of(&a), num_of(&b)) {
        (Some(x), Some(y)) => Expr::Num(x + y),
        (Some(z), _) if z == 0.0 => b,
        (_, Some(z)) if z == 0.0 => a,
        _ => Expr::Bin(BinOp::Add, Box::new(a), Box::new(b)),
    }
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    match (num_of(&a), num_of(&b)) {
        (Some(x), Some(y)) => Expr::Num(x - y),
        (Some(z), _) if z == 0.0 => neg(b),
        (_, Some(z)) if z == 0.0 => a,
        _ => Expr::Bin(BinOp::Sub, Box::new(a), Box::new(b)),
    }
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    match (num_of(&a), num_of(&b)) {
        (Some(x), Some(y)) => Expr::Num(x * y),
        (Some(z), _) | (_, Some(z)) if z == 0.0 => Expr::Num(0.0),
        (Some(o), _) if o == 1.0 => b,
        (_, Some(o)) if o == 1.0 => a,
        (Some(m), _) if m == -1.0 => neg(b),
        (_, Some(m)) if m == -1.0 => neg(a),
        _ => Expr::Bin(BinOp::Mul, Box::new(a), Box::new(b)),
    }
}

pub fn div(a: Expr, b: Expr) -> Expr {
    match (num_of(&a), num_of(&b)) {
        (Some(z), _) if z == 0.0 => Expr::Num(0.0),
        (_, Some(o)) if o == 1.0 => a,
        _ => Expr::Bin(BinOp::Div, Box::new(a), Box::new(b)),
    }
}

pub fn pow(a: Expr, b: Expr) -> Expr {
    match num_of(&b) {
        Some(o) if o == 1.0 => a,
        Some(z) if z == 0.0 => Expr::Num(1.0),
        _ => Expr::Bin(BinOp::Pow, Box::new(a), Box::new(b)),
    }
}

pub fn call(f: Func, a: Expr) -> Expr {
    Expr::Call(f, Box::new(a))
}

// ---------------------------------------------------------------------------
// evaluation, differentiation, printing

impl Expr {
    pub fn depends_on(&self, v: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Neg(a) | Expr::Call(_, a) => a.depends_on(v),
            Expr::Bin(_, a, b) => a.depends_on(v) || b.depends_on(v),
        }
    }

    pub fn eval(&self, env: &Env) -> Result<f64, EvalError> {
        let domain = |reason: &str, e: &Expr| EvalError {
            reason: reason.to_string(),
            subexpr: e.to_string(),
        };
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(v) => env.get(*v),
            Expr::Neg(a) => -a.eval(env)?,
            Expr::Bin(op, a, b) => {
                let (l, r) = (a.eval(env)?, b.eval(env)?);
                match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                    BinOp::Div => {
                        if r == 0.0 {
                            return Err(domain("division by zero", self));
                        }
                        l / r
                    }
                    BinOp::Pow => {
                        if l < 0.0 && r.fract() != 0.0 {
                            return Err(domain("negative base with non-integer exponent", self));
                        }
                        if l == 0.0 && r < 0.0 {
                            return Err(domain("zero base with negative exponent", self));
                        }
                        if r.fract() == 0.0 && r.abs() <= i32::MAX as f64 {
                            l.powi(r as i32)
                        } else {
                            l.powf(r)
                        }
                    }
                }
            }
            Expr::Call(f, a) => {
                let v = a.eval(env)?;
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                    Func::Log => {
                        if v <= 0.0 {
                            return Err(domain("logarithm of a nonpositive number", self));
                        }
                        v.ln()
                    }
                    Func::Sqrt => {
                        if v < 0.0 {
                            return Err(domain("square root of a negative number", self));
                        }
                        v.sqrt()
                    }
                    Func::Abs => v.abs(),
                    Func::Tanh => v.tanh(),
                }
            }
        })
    }

    /// Symbolic partial derivative with respect to `x` or `y`. Subtrees that
    /// do not mention `var` differentiate to zero without inspection.
    pub fn differentiate(&self, var: Var) -> Result<Expr, DiffError> {
        if !self.depends_on(var) {
            return Ok(Expr::Num(0.0));
        }
        let fail = || DiffError { var: var.name(), subexpr: self.to_string() };
        Ok(match self {
            Expr::Num(_) => Expr::Num(0.0),
            Expr::Var(v) => Expr::Num(if *v == var { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.differentiate(var)?),
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.as_ref(), b.as_ref());
                match op {
                    BinOp::Add => add(a.differentiate(var)?, b.differentiate(var)?),
                    BinOp::Sub => sub(a.differentiate(var)?, b.differentiate(var)?),
                    BinOp::Mul => add(
                        mul(a.differentiate(var)?, b.clone()),
                        mul(a.clone(), b.differentiate(var)?),
                    ),
                    BinOp::Div => div(
                        sub(
                            mul(a.differentiate(var)?, b.clone()),
                            mul(a.clone(), b.differentiate(var)?),
                        ),
                        pow(b.clone(), Expr::Num(2.0)),
                    ),
                    BinOp::Pow if !b.depends_on(var) => {
                        let lowered = match num_of(b) {
                            Some(c) => Expr::Num(c - 1.0),
                            None => sub(b.clone(), Expr::Num(1.0)),
                        };
                        mul(mul(b.clone(), pow(a.clone(), lowered)), a.differentiate(var)?)
                    }
                    BinOp::Pow => {
                        // d(a^b) = a^b (b' log a + b a'/a)
                        let da = a.differentiate(var)?;
                        let db = b.differentiate(var)?;
                        mul(
                            self.clone(),
                            add(
                                mul(db, call(Func::Log, a.clone())),
                                div(mul(b.clone(), da), a.clone()),
                            ),
                        )
                    }
                }
            }
            Expr::Call(f, a) => {
                let inner = a.as_ref().clone();
                let da = a.differentiate(var)?;
                let outer = match f {
                    Func::Sin => call(Func::Cos, inner),
                    Func::Cos => neg(call(Func::Sin, inner)),
                    Func::Exp => call(Func::Exp, inner),
                    Func::Log => return Ok(div(da, inner)),
                    Func::Sqrt => {
                        return Ok(div(da, mul(Expr::Num(2.0), call(Func::Sqrt, inner))))
                    }
                    Func::Tanh => {
                        sub(Expr::Num(1.0), pow(call(Func::Tanh, inner), Expr::Num(2.0)))
                    }
                    Func::Abs => return Err(fail()),
                };
                mul(outer, da)
            }
        })
    }

    /// Replaces variables according to `f`.
    pub fn map_vars(&self, f: &impl Fn(Var) -> Expr) -> Expr {
        match self {
            Expr::Num(v) => Expr::Num(*v),
            Expr::Var(v) => f(*v),
            Expr::Neg(a) => Expr::Neg(Box::new(a.map_vars(f))),
            Expr::Bin(op, a, b) => Expr::Bin(*op, Box::new(a.map_vars(f)), Box::new(b.map_vars(f))),
            Expr::Call(g, a) => Expr::Call(*g, Box::new(a.map_vars(f))),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expr::Num(_) | Expr::Var(_) => 1,
            Expr::Neg(a) | Expr::Call(_, a) => 1 + a.node_count(),
            Expr::Bin(_, a, b) => 1 + a.node_count() + b.node_count(),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Num(v) if v.is_sign_negative() => 3,
            Expr::Bin(BinOp::Pow, ..) => 4,
            _ => 5,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(f: &mut fmt::Formatter<'_>, e: &Expr, paren: bool) -> fmt::Result {
            if paren {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Num(v) => {
                if v.is_sign_negative() {
                    // "-0" must not lose its sign through the parser's folding
                    write!(f, "-{}", -v)
                } else {
                    write!(f, "{v}")
                }
            }
            Expr::Var(v) => f.write_str(v.name()),
            Expr::Neg(a) => {
                f.write_str("-")?;
                child(f, a, a.precedence() < 3)
            }
            Expr::Bin(BinOp::Pow, a, b) => {
                child(f, a, a.precedence() <= 4)?;
                f.write_str("^")?;
                child(f, b, b.precedence() < 4)
            }
            Expr::Bin(op, a, b) => {
                let p = self.precedence();
                child(f, a, a.precedence() < p)?;
                write!(f, "{}", op.symbol())?;
                child(f, b, b.precedence() <= p)
            }
            Expr::Call(g, a) => write!(f, "{}({a})", g.name()),
        }
    }
}

/// Second partials of a field, present when the first partials are
/// themselves differentiable.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondPartials {
    pub fxx: Expr,
    pub fxy: Expr,
    pub fyy: Expr,
}

/// An integrand `F` with its symbolic partial derivatives in `x` and `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    source: String,
    pub f: Expr,
    pub fx: Expr,
    pub fy: Expr,
    pub second: Option<SecondPartials>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    NotDifferentiable(#[from] DiffError),
}

impl ScalarField {
    pub fn parse(text: &str) -> Result<Self, FieldError> {
        let f = parse(text)?;
        Ok(Self::from_expr(text.to_string(), f)?)
    }

    pub fn from_expr(source: String, f: Expr) -> Result<Self, DiffError> {
        let fx = f.differentiate(Var::X)?;
        let fy = f.differentiate(Var::Y)?;
        let second = (|| -> Result<SecondPartials, DiffError> {
            Ok(SecondPartials {
                fxx: fx.differentiate(Var::X)?,
                fxy: fx.differentiate(Var::Y)?,
                fyy: fy.differentiate(Var::Y)?,
            })
        })()
        .ok();
        Ok(Self { source, f, fx, fy, second })
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(s: &str) -> Expr {
        parse(s).unwrap()
    }

    fn var(v: Var) -> Expr {
        Expr::Var(v)
    }

    fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            p("x*y + u"),
            bin(BinOp::Add, bin(BinOp::Mul, var(Var::X), var(Var::Y)), var(Var::U))
        );
        assert_eq!(
            p("x^2 - y^2"),
            bin(
                BinOp::Sub,
                bin(BinOp::Pow, var(Var::X), Expr::Num(2.0)),
                bin(BinOp::Pow, var(Var::Y), Expr::Num(2.0))
            )
        );
        let err = parse("sin(k*x) /").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { offset: 9, .. }), "{err:?}");
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(p("-x^2"), Expr::Neg(Box::new(p("x^2"))));
        assert_eq!(p("2^3^2"), bin(BinOp::Pow, Expr::Num(2.0), p("3^2")));
        assert_eq!(p("1 - 2 - 3"), bin(BinOp::Sub, p("1 - 2"), Expr::Num(3.0)));
        assert_eq!(p("-x*y"), bin(BinOp::Mul, Expr::Neg(Box::new(var(Var::X))), var(Var::Y)));
        assert_eq!(p("x^-2"), bin(BinOp::Pow, var(Var::X), Expr::Num(-2.0)));
        assert_eq!(p(" ( x ) "), var(Var::X));
        assert_eq!(p("1.5e-3"), Expr::Num(1.5e-3));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse("z + 1"), Err(ParseError::UnknownIdentifier { offset: 0, .. })));
        assert!(matches!(parse("1 + foo(x)"), Err(ParseError::UnknownIdentifier { offset: 4, .. })));
        assert!(matches!(parse("sin(x, y)"), Err(ParseError::Arity { got: 2, .. })));
        assert!(matches!(parse("exp()"), Err(ParseError::Arity { got: 0, .. })));
        assert!(matches!(parse("(x + 1"), Err(ParseError::Syntax { offset: 0, .. })));
        assert!(matches!(parse("x $ y"), Err(ParseError::Syntax { offset: 2, .. })));
        assert!(matches!(parse("x y"), Err(ParseError::Syntax { offset: 2, .. })));
        assert!(matches!(parse(""), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("sin x"), Err(ParseError::Syntax { offset: 4, .. })));
    }

    #[test]
    fn eval_examples() {
        let env = Env::new(1.0, 2.0, 3.0, -1.0);
        assert_eq!(p("x*y + u").eval(&env).unwrap(), 5.0);
        assert_eq!(p("exp(0)").eval(&env).unwrap(), 1.0);
        let err = p("log(x)").eval(&Env::new(0.0, -1.0, 0.0, 0.0)).unwrap_err();
        assert_eq!(err.subexpr, "log(x)");
        assert!(p("sqrt(y)").eval(&Env::new(0.0, 0.0, -1.0, 0.0)).is_err());
        assert!(p("1/(x-2)").eval(&env).is_err());
        assert!(p("x^0.5").eval(&Env::new(0.0, -4.0, 0.0, 0.0)).is_err());
        assert_eq!(p("x^3").eval(&Env::new(0.0, -2.0, 0.0, 0.0)).unwrap(), -8.0);
        assert_eq!(p("abs(u) + tanh(0)").eval(&env).unwrap(), 1.0);
    }

    #[test]
    fn differentiate_examples() {
        assert_eq!(p("x^2").differentiate(Var::X).unwrap(), p("2*x"));
        assert_eq!(p("x*y + u").differentiate(Var::X).unwrap(), p("y"));
        assert_eq!(p("u*k").differentiate(Var::Y).unwrap(), Expr::Num(0.0));
        assert!(p("abs(x)*y").differentiate(Var::X).is_err());
        assert!(p("abs(x)*y").differentiate(Var::Y).is_ok());
        assert_eq!(p("abs(u)*x").differentiate(Var::X).unwrap(), p("abs(u)"));
    }

    #[test]
    fn field_partials() {
        let f = ScalarField::parse("x*y + exp(x) - exp(y)").unwrap();
        let sec = f.second.as_ref().unwrap();
        let env = Env::new(1.0, 0.3, -0.4, 0.0);
        assert!((sec.fxx.eval(&env).unwrap() - 0.3f64.exp()).abs() < 1e-15);
        assert_eq!(sec.fxy.eval(&env).unwrap(), 1.0);
        assert!((sec.fyy.eval(&env).unwrap() + (-0.4f64).exp()).abs() < 1e-15);
        assert!(ScalarField::parse("abs(x)").is_err());
        assert!(ScalarField::parse("x*abs(y)").is_err());
        assert!(ScalarField::parse("x*abs(u - k)").unwrap().second.is_some());
    }

    fn central_fd(e: &Expr, env: Env, v: Var) -> f64 {
        let at = env.get(v);
        let h = 1e-6 * (1.0 + at.abs());
        let plus = e.eval(&env.with(v, at + h)).unwrap();
        let minus = e.eval(&env.with(v, at - h)).unwrap();
        (plus - minus) / (2.0 * h)
    }

    // Every supported differentiable construct, with arguments kept inside
    // the domains of log and sqrt.
    const DIFFERENTIABLE: [&str; 12] = [
        "sin(x*y)",
        "cos(x - 2*y)",
        "exp(x*y/3)",
        "log(1 + x^2 + y^2)",
        "sqrt(3 + x*y)",
        "tanh(x + u*y)",
        "x^3*y - y^2/(1 + x^2)",
        "(2 + sin(x))^(1 + y^2)",
        "-x*y^2 + k*x",
        "x/(3 + cos(y))",
        "abs(u)*x^2 - abs(k)*y",
        "2^(x*y)",
    ];

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn derivatives_match_central_differences(
            k in 1.0f64..6.0, x in -1.5f64..1.5, y in -1.5f64..1.5, u in -1.0f64..1.0,
        ) {
            let env = Env::new(k, x, y, u);
            for text in DIFFERENTIABLE {
                let f = p(text);
                for v in [Var::X, Var::Y] {
                    let exact = f.differentiate(v).unwrap().eval(&env).unwrap();
                    let fd = central_fd(&f, env, v);
                    prop_assert!(
                        (exact - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                        "{text} d/{} exact={exact} fd={fd}", v.name()
                    );
                }
            }
        }

        #[test]
        fn mixed_partials_commute(x in -1.5f64..1.5, y in -1.5f64..1.5, u in -1.0f64..1.0) {
            let env = Env::new(2.0, x, y, u);
            for text in DIFFERENTIABLE {
                let f = p(text);
                let xy = f.differentiate(Var::X).unwrap().differentiate(Var::Y).unwrap();
                let yx = f.differentiate(Var::Y).unwrap().differentiate(Var::X).unwrap();
                let (a, b) = (xy.eval(&env).unwrap(), yx.eval(&env).unwrap());
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{text}: {a} vs {b}");
            }
        }

        #[test]
        fn evaluation_is_deterministic(x in -1.5f64..1.5, y in -1.5f64..1.5) {
            let env = Env::new(1.0, x, y, 0.5);
            for text in DIFFERENTIABLE {
                let f = p(text);
                prop_assert_eq!(f.eval(&env).unwrap().to_bits(), f.eval(&env).unwrap().to_bits());
            }
        }
    }

    #[test]
    fn printed_derivatives_reparse() {
        for text in DIFFERENTIABLE {
            let f = p(text);
            for v in [Var::X, Var::Y] {
                let d = f.differentiate(v).unwrap();
                assert_eq!(parse(&d.to_string()).unwrap(), d, "{d}");
            }
        }
    }
}
