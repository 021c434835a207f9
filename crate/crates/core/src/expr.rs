//! Scalar expressions of time used for time-varying matrix entries.
//!
//! Grammar:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | primary
//! primary := number | 't' | func '(' expr ')' | '(' expr ')'
//! func    := 'sin' | 'cos' | 'exp'
//! ```

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown function `{name}` at offset {offset}")]
    UnknownFunction { offset: usize, name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Exp => v.exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }

    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

/// Parsed expression tree over the time variable `t`.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeExpr {
    Num(f64),
    Time,
    Neg(Box<TimeExpr>),
    Binary(BinOp, Box<TimeExpr>, Box<TimeExpr>),
    Call(Func, Box<TimeExpr>),
}

impl TimeExpr {
    pub fn parse(text: &str) -> Result<Self, ExprError> {
        let mut parser = Parser { src: text.as_bytes(), pos: 0 };
        let expr = parser.expr()?;
        parser.skip_ws();
        if parser.pos != parser.src.len() {
            return Err(parser.error("unexpected trailing input"));
        }
        Ok(expr)
    }

    pub fn constant(value: f64) -> Self {
        TimeExpr::Num(value)
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeExpr::Num(v) => *v,
            TimeExpr::Time => t,
            TimeExpr::Neg(e) => -e.eval(t),
            TimeExpr::Binary(op, a, b) => op.apply(a.eval(t), b.eval(t)),
            TimeExpr::Call(f, e) => f.apply(e.eval(t)),
        }
    }

    /// True when the expression references `t`.
    pub fn depends_on_time(&self) -> bool {
        match self {
            TimeExpr::Num(_) => false,
            TimeExpr::Time => true,
            TimeExpr::Neg(e) | TimeExpr::Call(_, e) => e.depends_on_time(),
            TimeExpr::Binary(_, a, b) => a.depends_on_time() || b.depends_on_time(),
        }
    }

    /// Value of a time-independent expression.
    pub fn as_constant(&self) -> Option<f64> {
        if self.depends_on_time() {
            None
        } else {
            Some(self.eval(0.0))
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            TimeExpr::Binary(op, _, _) => op.precedence(),
            TimeExpr::Neg(_) => 3,
            TimeExpr::Num(v) if v.is_sign_negative() => 3,
            _ => 4,
        }
    }
}

impl FromStr for TimeExpr {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TimeExpr::parse(s)
    }
}

impl fmt::Display for TimeExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeExpr::Num(v) => {
                if v.is_sign_negative() {
                    write!(f, "-{:?}", -v)
                } else {
                    write!(f, "{v:?}")
                }
            }
            TimeExpr::Time => f.write_str("t"),
            TimeExpr::Neg(e) => {
                if e.precedence() < 3 {
                    write!(f, "-({e})")
                } else {
                    write!(f, "-{e}")
                }
            }
            TimeExpr::Call(func, e) => write!(f, "{}({e})", func.name()),
            TimeExpr::Binary(op, a, b) => {
                let p = op.precedence();
                if a.precedence() < p {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                write!(f, " {} ", op.symbol())?;
                // Floating-point + and * are not associative, so a right
                // operand of equal precedence keeps its parentheses.
                if b.precedence() <= p {
                    write!(f, "({b})")
                } else {
                    write!(f, "{b}")
                }
            }
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> ExprError {
        ExprError::Syntax { offset: self.pos, message: message.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<TimeExpr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = TimeExpr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<TimeExpr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = TimeExpr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<TimeExpr, ExprError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(TimeExpr::Neg(Box::new(inner)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<TimeExpr, ExprError> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(_) => Err(self.error("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<TimeExpr, ExprError> {
        let start = self.pos;
        let src = self.src;
        let mut end = start;
        while end < src.len() && (src[end].is_ascii_digit() || src[end] == b'.') {
            end += 1;
        }
        if end < src.len() && (src[end] == b'e' || src[end] == b'E') {
            let mut exp = end + 1;
            if exp < src.len() && (src[exp] == b'+' || src[exp] == b'-') {
                exp += 1;
            }
            if exp < src.len() && src[exp].is_ascii_digit() {
                while exp < src.len() && src[exp].is_ascii_digit() {
                    exp += 1;
                }
                end = exp;
            }
        }
        // Slice boundaries are ASCII, so this cannot split a code point.
        let text = std::str::from_utf8(&src[start..end]).expect("ascii slice");
        let value: f64 = text.parse().map_err(|_| ExprError::Syntax {
            offset: start,
            message: format!("malformed number `{text}`"),
        })?;
        self.pos = end;
        Ok(TimeExpr::Num(value))
    }

    fn ident(&mut self) -> Result<TimeExpr, ExprError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii slice");
        if name == "t" {
            return Ok(TimeExpr::Time);
        }
        let func = match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            _ => {
                return Err(ExprError::UnknownFunction { offset: start, name: name.to_string() });
            }
        };
        if self.peek() != Some(b'(') {
            return Err(self.error("expected `(` after function name"));
        }
        self.pos += 1;
        let arg = self.expr()?;
        if self.peek() != Some(b')') {
            return Err(self.error("expected `)`"));
        }
        self.pos += 1;
        Ok(TimeExpr::Call(func, Box::new(arg)))
    }
}
