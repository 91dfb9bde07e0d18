//! Scalar expressions over the spatial variables `x1..xn` (n ≤ 2).
//!
//! Expressions are parsed once into an immutable tree and evaluated either
//! for their value or for a second-order jet (value, gradient, Hessian)
//! using forward-mode propagation rules. No finite differences are involved,
//! so the derivatives are exact up to round-off.
//!
//! Grammar, loosest to tightest binding:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | power
//! power   := primary ('^' unary)?        right-associative
//! primary := number | x1 | x2 | func '(' expr ')' | '(' expr ')'
//! func    := exp | ln | sin | cos | sqrt | abs | tanh
//! ```

use std::fmt;

use thiserror::Error;

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("empty expression")]
    Empty,
    #[error("unsupported dimension {0}; expected 1 or 2")]
    Dimension(usize),
    #[error("syntax error at column {column}: {message}")]
    Syntax { column: usize, message: String },
    #[error("unknown identifier `{name}` at column {column}")]
    UnknownIdentifier { name: String, column: usize },
    #[error("variable x{index} at column {column} exceeds dimension {dim}")]
    VariableOutOfRange {
        index: usize,
        dim: usize,
        column: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    LogDomain,
    SqrtDomain,
    PowDomain,
    DivisionByZero,
    NonFinite,
    PointDimension,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FaultKind::LogDomain => "logarithm of a non-positive value",
            FaultKind::SqrtDomain => "square root of a negative value",
            FaultKind::PowDomain => "non-integer power of a non-positive base",
            FaultKind::DivisionByZero => "division by zero",
            FaultKind::NonFinite => "non-finite result",
            FaultKind::PointDimension => "point dimension does not match expression",
        };
        f.write_str(s)
    }
}

/// Evaluation failure, carrying the point where it happened.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("evaluation fault at {point:?}: {kind}")]
pub struct EvalFault {
    pub point: Vec<f64>,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Ln,
    Sin,
    Cos,
    Sqrt,
    Abs,
    Tanh,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
        }
    }

    /// Value, first and second derivative at `v`.
    fn taylor2(self, v: f64) -> Result<(f64, f64, f64), FaultKind> {
        Ok(match self {
            Func::Exp => {
                let e = v.exp();
                (e, e, e)
            }
            Func::Ln => {
                if v <= 0.0 {
                    return Err(FaultKind::LogDomain);
                }
                (v.ln(), 1.0 / v, -1.0 / (v * v))
            }
            Func::Sin => {
                let (s, c) = v.sin_cos();
                (s, c, -s)
            }
            Func::Cos => {
                let (s, c) = v.sin_cos();
                (c, -s, -c)
            }
            Func::Sqrt => {
                if v < 0.0 {
                    return Err(FaultKind::SqrtDomain);
                }
                let r = v.sqrt();
                (r, 0.5 / r, -0.25 / (r * v))
            }
            Func::Abs => {
                let s = if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (v.abs(), s, 0.0)
            }
            Func::Tanh => {
                let t = v.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
        })
    }

    fn value(self, v: f64) -> Result<f64, FaultKind> {
        match self {
            Func::Ln if v <= 0.0 => Err(FaultKind::LogDomain),
            Func::Sqrt if v < 0.0 => Err(FaultKind::SqrtDomain),
            Func::Exp => Ok(v.exp()),
            Func::Ln => Ok(v.ln()),
            Func::Sin => Ok(v.sin()),
            Func::Cos => Ok(v.cos()),
            Func::Sqrt => Ok(v.sqrt()),
            Func::Abs => Ok(v.abs()),
            Func::Tanh => Ok(v.tanh()),
        }
    }
}

/// Expression tree. Variables are stored zero-based (`x1` is `Var(0)`).
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    /// Value of a variable-free subtree.
    fn constant_value(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            Expr::Var(_) => None,
            Expr::Neg(e) => e.constant_value().map(|v| -v),
            Expr::Binary(op, l, r) => {
                let (a, b) = (l.constant_value()?, r.constant_value()?);
                Some(match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => a.powf(b),
                })
            }
            Expr::Call(f, e) => f.value(e.constant_value()?).ok(),
        }
    }

    fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(i) => Some(*i),
            Expr::Neg(e) | Expr::Call(_, e) => e.max_var(),
            Expr::Binary(_, l, r) => match (l.max_var(), r.max_var()) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            },
        }
    }

    fn eval(&self, x: &[f64]) -> Result<f64, FaultKind> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var(i) => Ok(x[*i]),
            Expr::Neg(e) => Ok(-e.eval(x)?),
            Expr::Call(f, e) => f.value(e.eval(x)?),
            Expr::Binary(op, l, r) => {
                let a = l.eval(x)?;
                match op {
                    BinOp::Add => Ok(a + r.eval(x)?),
                    BinOp::Sub => Ok(a - r.eval(x)?),
                    BinOp::Mul => Ok(a * r.eval(x)?),
                    BinOp::Div => {
                        let b = r.eval(x)?;
                        if b == 0.0 {
                            return Err(FaultKind::DivisionByZero);
                        }
                        Ok(a / b)
                    }
                    BinOp::Pow => {
                        let b = r.eval(x)?;
                        match integer_exponent(r) {
                            Some(n) => {
                                if a == 0.0 && n < 0 {
                                    return Err(FaultKind::DivisionByZero);
                                }
                                Ok(a.powi(n))
                            }
                            None => {
                                if a < 0.0 {
                                    return Err(FaultKind::PowDomain);
                                }
                                if a == 0.0 && b <= 0.0 {
                                    return Err(FaultKind::DivisionByZero);
                                }
                                Ok(a.powf(b))
                            }
                        }
                    }
                }
            }
        }
    }

    fn jet(&self, x: &[f64], dim: usize) -> Result<Jet2, FaultKind> {
        match self {
            Expr::Const(c) => Ok(Jet2::constant(dim, *c)),
            Expr::Var(i) => Ok(Jet2::variable(dim, *i, x[*i])),
            Expr::Neg(e) => Ok(e.jet(x, dim)?.scale(-1.0)),
            Expr::Call(f, e) => {
                let inner = e.jet(x, dim)?;
                let (g0, g1, g2) = f.taylor2(inner.value)?;
                Ok(inner.compose(g0, g1, g2))
            }
            Expr::Binary(op, l, r) => {
                let a = l.jet(x, dim)?;
                match op {
                    BinOp::Add => Ok(a.add(&r.jet(x, dim)?)),
                    BinOp::Sub => Ok(a.add(&r.jet(x, dim)?.scale(-1.0))),
                    BinOp::Mul => Ok(a.mul(&r.jet(x, dim)?)),
                    BinOp::Div => {
                        let b = r.jet(x, dim)?;
                        if b.value == 0.0 {
                            return Err(FaultKind::DivisionByZero);
                        }
                        let v = b.value;
                        let recip = b.compose(1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v));
                        Ok(a.mul(&recip))
                    }
                    BinOp::Pow => match integer_exponent(r) {
                        Some(n) => {
                            let v = a.value;
                            if v == 0.0 && n < 0 {
                                return Err(FaultKind::DivisionByZero);
                            }
                            let nf = n as f64;
                            let g0 = v.powi(n);
                            let g1 = if n == 0 { 0.0 } else { nf * v.powi(n - 1) };
                            let g2 = if n == 0 || n == 1 {
                                0.0
                            } else {
                                nf * (nf - 1.0) * v.powi(n - 2)
                            };
                            Ok(a.compose(g0, g1, g2))
                        }
                        None => match r.constant_value() {
                            Some(c) => {
                                let v = a.value;
                                if v < 0.0 {
                                    return Err(FaultKind::PowDomain);
                                }
                                if v == 0.0 && c <= 0.0 {
                                    return Err(FaultKind::DivisionByZero);
                                }
                                let g0 = v.powf(c);
                                let g1 = c * v.powf(c - 1.0);
                                let g2 = c * (c - 1.0) * v.powf(c - 2.0);
                                Ok(a.compose(g0, g1, g2))
                            }
                            None => {
                                // f^g = exp(g ln f)
                                if a.value <= 0.0 {
                                    return Err(FaultKind::PowDomain);
                                }
                                let v = a.value;
                                let log_a = a.compose(v.ln(), 1.0 / v, -1.0 / (v * v));
                                let prod = r.jet(x, dim)?.mul(&log_a);
                                let e = prod.value.exp();
                                Ok(prod.compose(e, e, e))
                            }
                        },
                    },
                }
            }
        }
    }
}

fn integer_exponent(e: &Expr) -> Option<i32> {
    let c = e.constant_value()?;
    if c.fract() == 0.0 && c.abs() <= 1024.0 {
        Some(c as i32)
    } else {
        None
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesized form that parses back to the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
        }
    }
}

/// Second-order jet of a scalar field at a point. Entries beyond `dim` are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet2 {
    pub dim: usize,
    pub value: f64,
    pub gradient: [f64; MAX_DIM],
    pub hessian: [[f64; MAX_DIM]; MAX_DIM],
}

impl Jet2 {
    pub fn constant(dim: usize, value: f64) -> Self {
        Jet2 {
            dim,
            value,
            gradient: [0.0; MAX_DIM],
            hessian: [[0.0; MAX_DIM]; MAX_DIM],
        }
    }

    pub fn variable(dim: usize, index: usize, value: f64) -> Self {
        let mut j = Jet2::constant(dim, value);
        j.gradient[index] = 1.0;
        j
    }

    fn scale(mut self, s: f64) -> Self {
        self.value *= s;
        for i in 0..MAX_DIM {
            self.gradient[i] *= s;
            for k in 0..MAX_DIM {
                self.hessian[i][k] *= s;
            }
        }
        self
    }

    fn add(&self, o: &Jet2) -> Jet2 {
        let mut out = *self;
        out.value += o.value;
        for i in 0..MAX_DIM {
            out.gradient[i] += o.gradient[i];
            for k in 0..MAX_DIM {
                out.hessian[i][k] += o.hessian[i][k];
            }
        }
        out
    }

    fn mul(&self, o: &Jet2) -> Jet2 {
        let (a, b) = (self, o);
        let mut out = Jet2::constant(self.dim, a.value * b.value);
        for i in 0..MAX_DIM {
            out.gradient[i] = a.value * b.gradient[i] + b.value * a.gradient[i];
        }
        for i in 0..MAX_DIM {
            for k in i..MAX_DIM {
                let h = a.value * b.hessian[i][k]
                    + b.value * a.hessian[i][k]
                    + a.gradient[i] * b.gradient[k]
                    + a.gradient[k] * b.gradient[i];
                out.hessian[i][k] = h;
                out.hessian[k][i] = h;
            }
        }
        out
    }

    /// Chain rule for `g(self)` given `g`, `g'`, `g''` at `self.value`.
    fn compose(&self, g0: f64, g1: f64, g2: f64) -> Jet2 {
        let mut out = Jet2::constant(self.dim, g0);
        for i in 0..MAX_DIM {
            out.gradient[i] = g1 * self.gradient[i];
        }
        for i in 0..MAX_DIM {
            for k in i..MAX_DIM {
                let h = g2 * self.gradient[i] * self.gradient[k] + g1 * self.hessian[i][k];
                out.hessian[i][k] = h;
                out.hessian[k][i] = h;
            }
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.gradient.iter().all(|g| g.is_finite())
            && self.hessian.iter().flatten().all(|h| h.is_finite())
    }
}

/// A parsed expression together with its declared spatial dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Expr,
    dim: usize,
}

impl Expression {
    pub fn parse(text: &str, dim: usize) -> Result<Self, ExprError> {
        parse(text, dim)
    }

    pub fn constant(value: f64, dim: usize) -> Self {
        Expression {
            root: Expr::Const(value),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn root(&self) -> &Expr {
        &self.root
    }

    /// Value of the expression if it does not depend on any variable.
    pub fn constant_value(&self) -> Option<f64> {
        self.root.constant_value()
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64, EvalFault> {
        let fault = |kind| EvalFault {
            point: point.to_vec(),
            kind,
        };
        if point.len() != self.dim {
            return Err(fault(FaultKind::PointDimension));
        }
        let v = self.root.eval(point).map_err(fault)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(fault(FaultKind::NonFinite))
        }
    }

    pub fn eval_jet(&self, point: &[f64]) -> Result<Jet2, EvalFault> {
        let fault = |kind| EvalFault {
            point: point.to_vec(),
            kind,
        };
        if point.len() != self.dim {
            return Err(fault(FaultKind::PointDimension));
        }
        let j = self.root.jet(point, self.dim).map_err(fault)?;
        if j.is_finite() {
            Ok(j)
        } else {
            Err(fault(FaultKind::NonFinite))
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v: f64 = s.parse().map_err(|_| ExprError::Syntax {
                column,
                message: format!("malformed number `{s}`"),
            })?;
            out.push((Tok::Num(v), column));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), column));
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                _ => {
                    return Err(ExprError::Syntax {
                        column,
                        message: format!("unexpected character `{c}`"),
                    })
                }
            };
            out.push((tok, column));
            i += 1;
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    dim: usize,
    end_column: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn column(&self) -> usize {
        self.toks
            .get(self.pos)
            .map(|(_, c)| *c)
            .unwrap_or(self.end_column)
    }

    fn syntax<T>(&self, message: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Syntax {
            column: self.column(),
            message: message.into(),
        })
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let column = self.column();
        let Some((tok, _)) = self.toks.get(self.pos).cloned() else {
            return self.syntax("unexpected end of expression");
        };
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Expr::Const(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                if let Some(func) = Func::from_name(&name) {
                    if self.peek() != Some(&Tok::LParen) {
                        return self.syntax(format!("expected `(` after `{name}`"));
                    }
                    self.pos += 1;
                    let arg = self.expr()?;
                    self.expect_rparen()?;
                    return Ok(Expr::Call(func, Box::new(arg)));
                }
                let index = name
                    .strip_prefix('x')
                    .filter(|d| !d.is_empty() && d.chars().all(|c| c.is_ascii_digit()))
                    .and_then(|d| d.parse::<usize>().ok())
                    .filter(|&i| i >= 1);
                match index {
                    Some(i) if i <= self.dim => Ok(Expr::Var(i - 1)),
                    Some(i) => Err(ExprError::VariableOutOfRange {
                        index: i,
                        dim: self.dim,
                        column,
                    }),
                    None => Err(ExprError::UnknownIdentifier { name, column }),
                }
            }
            Tok::Op(c) => Err(ExprError::Syntax {
                column,
                message: format!("unexpected operator `{c}`"),
            }),
            Tok::RParen => Err(ExprError::Syntax {
                column,
                message: "unexpected `)`".into(),
            }),
        }
    }

    fn expect_rparen(&mut self) -> Result<(), ExprError> {
        if self.peek() == Some(&Tok::RParen) {
            self.pos += 1;
            Ok(())
        } else {
            self.syntax("expected `)`")
        }
    }
}

/// Parse `text` as an expression in `dim` variables.
pub fn parse(text: &str, dim: usize) -> Result<Expression, ExprError> {
    if dim == 0 || dim > MAX_DIM {
        return Err(ExprError::Dimension(dim));
    }
    if text.trim().is_empty() {
        return Err(ExprError::Empty);
    }
    let toks = tokenize(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        dim,
        end_column: text.chars().count() + 1,
    };
    let root = p.expr()?;
    if p.pos != p.toks.len() {
        return p.syntax("trailing input");
    }
    debug_assert!(root.max_var().map_or(true, |v| v < dim));
    Ok(Expression { root, dim })
}
