//! Arithmetic expressions over chart coordinates.
//!
//! Grammar (whitespace and newlines are insignificant):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | power
//! power   := atom ('^' unary)?            right associative, binds tighter than unary minus
//! atom    := NUMBER | VAR | FUNC '(' expr ')' | '(' expr ')'
//! VAR     := 'x1' .. 'xn'
//! FUNC    := 'sin' | 'cos' | 'exp' | 'sqrt'
//! NUMBER  := digits ['.' digits] [('e' | 'E') ['+' | '-'] digits]
//! ```
//!
//! Errors report the 1-based line and column of the offending token.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    /// Only produced by differentiation of non-constant powers.
    Ln,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    /// Zero-based coordinate index.
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    /// Parses `src` with variables `x1..x{dim}`.
    pub fn parse(src: &str, dim: usize) -> Result<Expr> {
        let tokens = tokenize(src)?;
        let mut p = Parser {
            tokens,
            pos: 0,
            dim,
            end: end_position(src),
        };
        let e = p.expr()?;
        if let Some(tok) = p.peek() {
            return Err(parse_err(tok.pos, format!("unexpected {}", tok.kind)));
        }
        Ok(e)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(i) => x[*i],
            Expr::Neg(a) => -a.eval(x),
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Div(a, b) => a.eval(x) / b.eval(x),
            Expr::Pow(a, b) => match **b {
                Expr::Num(k) if k == k.trunc() && k.abs() <= 16.0 => a.eval(x).powi(k as i32),
                _ => a.eval(x).powf(b.eval(x)),
            },
            Expr::Call(f, a) => {
                let v = a.eval(x);
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                    Func::Sqrt => v.sqrt(),
                    Func::Ln => v.ln(),
                }
            }
        }
    }

    /// Symbolic partial derivative with respect to coordinate `k` (zero-based).
    pub fn diff(&self, k: usize) -> Expr {
        use Expr::*;
        match self {
            Num(_) => Num(0.0),
            Var(i) => Num(if *i == k { 1.0 } else { 0.0 }),
            Neg(a) => neg(a.diff(k)),
            Add(a, b) => add(a.diff(k), b.diff(k)),
            Sub(a, b) => sub(a.diff(k), b.diff(k)),
            Mul(a, b) => add(mul(a.diff(k), (**b).clone()), mul((**a).clone(), b.diff(k))),
            Div(a, b) => div(
                sub(mul(a.diff(k), (**b).clone()), mul((**a).clone(), b.diff(k))),
                pow((**b).clone(), Num(2.0)),
            ),
            Pow(a, b) => {
                if let Num(c) = **b {
                    mul(mul(Num(c), pow((**a).clone(), Num(c - 1.0))), a.diff(k))
                } else {
                    // d(a^b) = a^b (b' ln a + b a'/a)
                    mul(
                        self.clone(),
                        add(
                            mul(b.diff(k), Call(Func::Ln, a.clone())),
                            div(mul((**b).clone(), a.diff(k)), (**a).clone()),
                        ),
                    )
                }
            }
            Call(f, a) => {
                let inner = a.diff(k);
                let outer = match f {
                    Func::Sin => Call(Func::Cos, a.clone()),
                    Func::Cos => neg(Call(Func::Sin, a.clone())),
                    Func::Exp => self.clone(),
                    Func::Sqrt => div(Num(0.5), self.clone()),
                    Func::Ln => div(Num(1.0), (**a).clone()),
                };
                mul(outer, inner)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => Expr::Num(-v),
        Expr::Neg(inner) => *inner,
        a => Expr::Neg(Box::new(a)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x + y),
        (a, b) if a.is_zero() => b,
        (a, b) if b.is_zero() => a,
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x - y),
        (a, b) if b.is_zero() => a,
        (a, b) if a.is_zero() => neg(b),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x * y),
        (a, b) if a.is_zero() || b.is_zero() => Expr::Num(0.0),
        (Expr::Num(1.0), b) => b,
        (a, Expr::Num(1.0)) => a,
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (a, _) if a.is_zero() => Expr::Num(0.0),
        (a, Expr::Num(1.0)) => a,
        (a, b) => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (_, Expr::Num(0.0)) => Expr::Num(1.0),
        (a, Expr::Num(1.0)) => a,
        (a, b) => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Expr::Call(func, a) => {
                let name = match func {
                    Func::Sin => "sin",
                    Func::Cos => "cos",
                    Func::Exp => "exp",
                    Func::Sqrt => "sqrt",
                    Func::Ln => "ln",
                };
                write!(f, "{name}({a})")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pos {
    line: usize,
    column: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kind::Num(v) => write!(f, "number {v}"),
            Kind::Ident(s) => write!(f, "identifier `{s}`"),
            Kind::Op(c) => write!(f, "operator `{c}`"),
            Kind::LParen => write!(f, "`(`"),
            Kind::RParen => write!(f, "`)`"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Kind,
    pos: Pos,
}

fn parse_err(pos: Pos, message: impl Into<String>) -> Error {
    Error::Parse {
        line: pos.line,
        column: pos.column,
        message: message.into(),
    }
}

fn end_position(src: &str) -> Pos {
    let mut pos = Pos { line: 1, column: 1 };
    for c in src.chars() {
        if c == '\n' {
            pos.line += 1;
            pos.column = 1;
        } else {
            pos.column += 1;
        }
    }
    pos
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    let mut pos = Pos { line: 1, column: 1 };
    let advance = |pos: &mut Pos, c: char| {
        if c == '\n' {
            pos.line += 1;
            pos.column = 1;
        } else {
            pos.column += 1;
        }
    };
    while i < chars.len() {
        let c = chars[i];
        let start = pos;
        if c.is_whitespace() {
            advance(&mut pos, c);
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let mut j = i;
            while j < chars.len() && (chars[j].is_ascii_digit() || chars[j] == '.') {
                j += 1;
            }
            if j < chars.len() && (chars[j] == 'e' || chars[j] == 'E') {
                let mut k = j + 1;
                if k < chars.len() && (chars[k] == '+' || chars[k] == '-') {
                    k += 1;
                }
                if k < chars.len() && chars[k].is_ascii_digit() {
                    while k < chars.len() && chars[k].is_ascii_digit() {
                        k += 1;
                    }
                    j = k;
                }
            }
            let text: String = chars[i..j].iter().collect();
            let value: f64 = text
                .parse()
                .map_err(|_| parse_err(start, format!("malformed number `{text}`")))?;
            for &ch in &chars[i..j] {
                advance(&mut pos, ch);
            }
            tokens.push(Token {
                kind: Kind::Num(value),
                pos: start,
            });
            i = j;
        } else if c.is_ascii_alphabetic() || c == '_' {
            let mut j = i;
            while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
                j += 1;
            }
            let text: String = chars[i..j].iter().collect();
            for &ch in &chars[i..j] {
                advance(&mut pos, ch);
            }
            tokens.push(Token {
                kind: Kind::Ident(text),
                pos: start,
            });
            i = j;
        } else {
            let kind = match c {
                '+' | '-' | '*' | '/' | '^' => Kind::Op(c),
                '(' => Kind::LParen,
                ')' => Kind::RParen,
                other => return Err(parse_err(start, format!("unexpected character `{other}`"))),
            };
            advance(&mut pos, c);
            tokens.push(Token { kind, pos: start });
            i += 1;
        }
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    dim: usize,
    end: Pos,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn peek_op(&self, ops: &[char]) -> Option<char> {
        match self.peek() {
            Some(Token { kind: Kind::Op(c), .. }) if ops.contains(c) => Some(*c),
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(op) = self.peek_op(&['+', '-']) {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' {
                Expr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.peek_op(&['*', '/']) {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Expr::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek_op(&['-', '+']) {
            Some('-') => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(_) => {
                self.pos += 1;
                self.unary()
            }
            None => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.peek_op(&['^']).is_some() {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let Some(tok) = self.next() else {
            return Err(parse_err(self.end, "unexpected end of expression"));
        };
        match tok.kind {
            Kind::Num(v) => Ok(Expr::Num(v)),
            Kind::LParen => {
                let e = self.expr()?;
                self.expect_rparen(tok.pos)?;
                Ok(e)
            }
            Kind::Ident(name) => {
                let func = match name.as_str() {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "exp" => Some(Func::Exp),
                    "sqrt" => Some(Func::Sqrt),
                    _ => None,
                };
                if let Some(func) = func {
                    match self.next() {
                        Some(Token {
                            kind: Kind::LParen,
                            pos,
                        }) => {
                            let arg = self.expr()?;
                            self.expect_rparen(pos)?;
                            Ok(Expr::Call(func, Box::new(arg)))
                        }
                        Some(t) => Err(parse_err(t.pos, format!("expected `(` after `{name}`"))),
                        None => Err(parse_err(self.end, format!("expected `(` after `{name}`"))),
                    }
                } else {
                    let index = name
                        .strip_prefix('x')
                        .and_then(|d| d.parse::<usize>().ok())
                        .filter(|&k| k >= 1 && k <= self.dim);
                    match index {
                        Some(k) => Ok(Expr::Var(k - 1)),
                        None => Err(parse_err(
                            tok.pos,
                            format!("unknown identifier `{name}` (variables are x1..x{})", self.dim),
                        )),
                    }
                }
            }
            other => Err(parse_err(tok.pos, format!("unexpected {other}"))),
        }
    }

    fn expect_rparen(&mut self, open: Pos) -> Result<()> {
        match self.next() {
            Some(Token { kind: Kind::RParen, .. }) => Ok(()),
            Some(t) => Err(parse_err(t.pos, format!("expected `)`, found {}", t.kind))),
            None => Err(parse_err(open, "unclosed `(`".to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(src: &str, x: &[f64]) -> f64 {
        Expr::parse(src, x.len()).unwrap().eval(x)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(eval("1 + 2 * 3", &[]), 7.0);
        assert_eq!(eval("2 ^ 3 ^ 2", &[]), 512.0);
        assert_eq!(eval("-x1^2", &[3.0]), -9.0);
        assert_eq!(eval("(1 - 2) - 3", &[]), -4.0);
        assert_eq!(eval("8 / 2 / 2", &[]), 2.0);
        assert_eq!(eval("2e-1 * 10", &[]), 2.0);
    }

    #[test]
    fn functions() {
        let x = [0.3, -1.2];
        let v = eval("sin(x1) * cos(x2) + exp(x1) - sqrt(4)", &x);
        let expected = 0.3f64.sin() * (-1.2f64).cos() + 0.3f64.exp() - 2.0;
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn errors_cite_position() {
        match Expr::parse("x1 +\n  * x2", 2) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (2, 3)),
            other => panic!("unexpected {other:?}"),
        }
        match Expr::parse("x3", 2) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (1, 1)),
            other => panic!("unexpected {other:?}"),
        }
        match Expr::parse("sin(x1", 1) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (1, 4)),
            other => panic!("unexpected {other:?}"),
        }
        match Expr::parse("1 $ 2", 0) {
            Err(Error::Parse { column, .. }) => assert_eq!(column, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Expr::parse("", 1).is_err());
        assert!(Expr::parse("1 2", 1).is_err());
    }

    #[test]
    fn derivative_matches_central_difference() {
        let srcs = [
            "x1^2 * sin(x2) - x3 / (1 + x1^2)",
            "exp(-x1 * x2) + sqrt(2 + cos(x3))",
            "x1 ^ x2",
        ];
        let x = [0.7, 1.3, -0.4];
        for src in srcs {
            let e = Expr::parse(src, 3).unwrap();
            for k in 0..3 {
                let d = e.diff(k).eval(&x);
                let h = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                let fd = (e.eval(&xp) - e.eval(&xm)) / (2.0 * h);
                assert!((d - fd).abs() < 1e-7, "{src} d/dx{}: {d} vs {fd}", k + 1);
            }
        }
    }
}
