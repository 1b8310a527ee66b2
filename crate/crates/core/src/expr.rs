//! Expression language for generating functions.
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := unary (('*'|'/') unary)*
//! unary  := '-' unary | factor
//! factor := base ('^' '-'? integer)?
//! base   := number | 'v' | 'x[' idx ']' | 'y[' idx ']' | param
//!         | ident '(' args ')' | '(' expr ')'
//! ```
//!
//! Scalar functions are `exp`, `log`, `sqrt`. The vector functions `dot(a,b)`
//! and `norm2(a)` take linear combinations of `x` and `y` such as `x - 2*y`;
//! `norm2` is the squared Euclidean norm.

use std::collections::BTreeMap;

use crate::ad::{Scalar, D1, D2, D3, D4, MAX_ORDER};
use crate::error::{Error, Result};

/// `cx * x + cy * y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinComb {
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Const(f64),
    X(usize),
    Y(usize),
    V,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, i32),
    Exp(Box<Node>),
    Log(Box<Node>),
    Sqrt(Box<Node>),
    Dot(LinComb, LinComb),
    Norm2(LinComb),
}

impl Node {
    pub fn uses_v(&self) -> bool {
        match self {
            Node::V => true,
            Node::Const(_) | Node::X(_) | Node::Y(_) | Node::Dot(..) | Node::Norm2(_) => false,
            Node::Neg(a) | Node::Pow(a, _) | Node::Exp(a) | Node::Log(a) | Node::Sqrt(a) => a.uses_v(),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                a.uses_v() || b.uses_v()
            }
        }
    }

    fn eval<S: Scalar>(&self, x: &[S], y: &[S], v: S) -> Result<S> {
        Ok(match self {
            Node::Const(c) => S::cst(*c),
            Node::X(i) => x[*i],
            Node::Y(i) => y[*i],
            Node::V => v,
            Node::Neg(a) => -a.eval(x, y, v)?,
            Node::Add(a, b) => a.eval(x, y, v)? + b.eval(x, y, v)?,
            Node::Sub(a, b) => a.eval(x, y, v)? - b.eval(x, y, v)?,
            Node::Mul(a, b) => a.eval(x, y, v)? * b.eval(x, y, v)?,
            Node::Div(a, b) => {
                let den = b.eval(x, y, v)?;
                if den.re() == 0.0 {
                    return Err(Error::Domain("division by zero".into()));
                }
                a.eval(x, y, v)? / den
            }
            Node::Pow(a, k) => {
                let base = a.eval(x, y, v)?;
                if *k < 0 && base.re() == 0.0 {
                    return Err(Error::Domain("negative power of zero".into()));
                }
                base.powi(*k)
            }
            Node::Exp(a) => a.eval(x, y, v)?.exp(),
            Node::Log(a) => {
                let arg = a.eval(x, y, v)?;
                if !(arg.re() > 0.0) {
                    return Err(Error::Domain(format!("log of non-positive value {}", arg.re())));
                }
                arg.ln()
            }
            Node::Sqrt(a) => {
                let arg = a.eval(x, y, v)?;
                let r = arg.re();
                if r < 0.0 || (r == 0.0 && S::DEPTH > 0) {
                    return Err(Error::Domain(format!("sqrt of {r}")));
                }
                arg.sqrt()
            }
            Node::Dot(a, b) => {
                let mut acc = S::cst(0.0);
                for i in 0..x.len() {
                    let ai = comb(a, x[i], y[i]);
                    let bi = comb(b, x[i], y[i]);
                    acc = acc + ai * bi;
                }
                acc
            }
            Node::Norm2(a) => {
                let mut acc = S::cst(0.0);
                for i in 0..x.len() {
                    let ai = comb(a, x[i], y[i]);
                    acc = acc + ai * ai;
                }
                acc
            }
        })
    }
}

#[inline]
fn comb<S: Scalar>(c: &LinComb, xi: S, yi: S) -> S {
    if c.cy == 0.0 {
        xi.scale(c.cx)
    } else if c.cx == 0.0 {
        yi.scale(c.cy)
    } else {
        xi.scale(c.cx) + yi.scale(c.cy)
    }
}

/// A parsed expression in the variables `x[0..n]`, `y[0..n]`, `v`.
#[derive(Clone, Debug)]
pub struct Expr {
    root: Node,
    n: usize,
    source: String,
}

impl Expr {
    pub fn parse(text: &str, n: usize, params: &BTreeMap<String, f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("dimension must be at least 1".into()));
        }
        let tokens = lex(text)?;
        let mut p = Parser { tokens, pos: 0, n, params };
        let root = p.expr()?;
        if let Some(t) = p.peek() {
            return Err(Error::Syntax { pos: t.pos, msg: format!("unexpected {:?}", t.kind) });
        }
        Ok(Self { root, n, source: text.to_string() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn uses_v(&self) -> bool {
        self.root.uses_v()
    }

    /// If the expression has the shape `f(x, y) - v`, returns `f`.
    pub fn v_separable_part(&self) -> Option<Expr> {
        match &self.root {
            Node::Sub(f, rhs) if **rhs == Node::V && !f.uses_v() => Some(Expr {
                root: (**f).clone(),
                n: self.n,
                source: format!("({}) + v", self.source),
            }),
            _ => None,
        }
    }

    pub fn eval_generic<S: Scalar>(&self, x: &[S], y: &[S], v: S) -> Result<S> {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        let out = self.root.eval(x, y, v)?;
        if !out.all_finite() {
            return Err(Error::Domain("non-finite result".into()));
        }
        Ok(out)
    }

    pub fn eval(&self, x: &[f64], y: &[f64], v: f64) -> Result<f64> {
        self.eval_generic(x, y, v)
    }

    /// Mixed partial derivative with respect to the packed variables
    /// `z = (x, y, v)`; `axes` lists indices into `z`, repeats allowed.
    pub fn partial(&self, z: &[f64], axes: &[usize]) -> Result<f64> {
        let n = self.n;
        if z.len() != 2 * n + 1 {
            return Err(Error::Invalid(format!("expected {} packed variables, got {}", 2 * n + 1, z.len())));
        }
        if let Some(&bad) = axes.iter().find(|&&a| a > 2 * n) {
            return Err(Error::IndexOutOfRange { index: bad, n: 2 * n + 1 });
        }
        match axes.len() {
            0 => self.eval(&z[..n], &z[n..2 * n], z[2 * n]),
            1 => self.seeded_top::<D1>(z, axes),
            2 => self.seeded_top::<D2>(z, axes),
            3 => self.seeded_top::<D3>(z, axes),
            4 => self.seeded_top::<D4>(z, axes),
            k => {
                debug_assert!(k > MAX_ORDER);
                Err(Error::OrderTooHigh(k))
            }
        }
    }

    fn seeded_top<S: Scalar>(&self, z: &[f64], axes: &[usize]) -> Result<f64> {
        let n = self.n;
        let vars: Vec<S> = z
            .iter()
            .enumerate()
            .map(|(k, &val)| {
                let coeffs: Vec<f64> = axes.iter().map(|&a| if a == k { 1.0 } else { 0.0 }).collect();
                S::seeded(val, &coeffs)
            })
            .collect();
        Ok(self.eval_generic(&vars[..n], &vars[n..2 * n], vars[2 * n])?.top())
    }

    /// Nested central finite differences for cross-checking `partial`.
    /// The step on axis `a` is `h * max(1, |z_a|)`.
    pub fn partial_fd(&self, z: &[f64], axes: &[usize], h: f64) -> Result<f64> {
        let n = self.n;
        match axes.split_first() {
            None => self.eval(&z[..n], &z[n..2 * n], z[2 * n]),
            Some((&a, rest)) => {
                let step = h * z[a].abs().max(1.0);
                let mut zp = z.to_vec();
                let mut zm = z.to_vec();
                zp[a] += step;
                zm[a] -= step;
                Ok((self.partial_fd(&zp, rest, h)? - self.partial_fd(&zm, rest, h)?) / (2.0 * step))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// lexer

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
}

#[derive(Clone, Debug)]
struct Token {
    kind: Tok,
    pos: usize,
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        let single = match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
                continue;
            }
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '[' => Some(Tok::LBracket),
            ']' => Some(Tok::RBracket),
            ',' => Some(Tok::Comma),
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            _ => None,
        };
        if let Some(kind) = single {
            out.push(Token { kind, pos: start });
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s = &text[start..i];
            let val: f64 = s
                .parse()
                .map_err(|_| Error::Syntax { pos: start, msg: format!("bad number `{s}`") })?;
            out.push(Token { kind: Tok::Num(val), pos: start });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token { kind: Tok::Ident(text[start..i].to_string()), pos: start });
            continue;
        }
        return Err(Error::Syntax { pos: start, msg: format!("unexpected character `{c}`") });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// parser

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    n: usize,
    params: &'a BTreeMap<String, f64>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn peek_kind(&self) -> Option<&Tok> {
        self.peek().map(|t| &t.kind)
    }

    fn end_pos(&self) -> usize {
        self.tokens.last().map_or(0, |t| t.pos + 1)
    }

    fn next(&mut self) -> Result<Token> {
        let t = self
            .tokens
            .get(self.pos)
            .cloned()
            .ok_or_else(|| Error::Syntax { pos: self.end_pos(), msg: "unexpected end of input".into() })?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, kind: Tok) -> Result<()> {
        let t = self.next()?;
        if t.kind == kind {
            Ok(())
        } else {
            Err(Error::Syntax { pos: t.pos, msg: format!("expected {kind:?}, found {:?}", t.kind) })
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            match self.peek_kind() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek_kind() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.peek_kind() == Some(&Tok::Minus) {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.factor()
    }

    fn factor(&mut self) -> Result<Node> {
        let base = self.base()?;
        if self.peek_kind() != Some(&Tok::Caret) {
            return Ok(base);
        }
        self.pos += 1;
        let negative = if self.peek_kind() == Some(&Tok::Minus) {
            self.pos += 1;
            true
        } else {
            false
        };
        let t = self.next()?;
        match t.kind {
            Tok::Num(k) if k.fract() == 0.0 && k.abs() <= 64.0 => {
                let k = k as i32;
                Ok(Node::Pow(Box::new(base), if negative { -k } else { k }))
            }
            other => Err(Error::Syntax { pos: t.pos, msg: format!("exponent must be a small integer, found {other:?}") }),
        }
    }

    fn index(&mut self) -> Result<usize> {
        self.expect(Tok::LBracket)?;
        let t = self.next()?;
        let idx = match t.kind {
            Tok::Num(k) if k.fract() == 0.0 && k >= 0.0 => k as usize,
            other => return Err(Error::Syntax { pos: t.pos, msg: format!("expected index, found {other:?}") }),
        };
        self.expect(Tok::RBracket)?;
        if idx >= self.n {
            return Err(Error::IndexOutOfRange { index: idx, n: self.n });
        }
        Ok(idx)
    }

    fn base(&mut self) -> Result<Node> {
        let t = self.next()?;
        match t.kind {
            Tok::Num(c) => Ok(Node::Const(c)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(inner)
            }
            Tok::Ident(name) => match name.as_str() {
                "v" => Ok(Node::V),
                "x" | "y" => {
                    if self.peek_kind() != Some(&Tok::LBracket) {
                        return Err(Error::Syntax {
                            pos: t.pos,
                            msg: format!("vector `{name}` used as a scalar; index it or pass it to dot/norm2"),
                        });
                    }
                    let i = self.index()?;
                    Ok(if name == "x" { Node::X(i) } else { Node::Y(i) })
                }
                "exp" | "log" | "sqrt" => {
                    self.expect(Tok::LParen)?;
                    let arg = Box::new(self.expr()?);
                    self.expect(Tok::RParen)?;
                    Ok(match name.as_str() {
                        "exp" => Node::Exp(arg),
                        "log" => Node::Log(arg),
                        _ => Node::Sqrt(arg),
                    })
                }
                "dot" => {
                    self.expect(Tok::LParen)?;
                    let a = self.lincomb()?;
                    self.expect(Tok::Comma)?;
                    let b = self.lincomb()?;
                    self.expect(Tok::RParen)?;
                    Ok(Node::Dot(a, b))
                }
                "norm2" => {
                    self.expect(Tok::LParen)?;
                    let a = self.lincomb()?;
                    self.expect(Tok::RParen)?;
                    Ok(Node::Norm2(a))
                }
                _ => {
                    if self.peek_kind() == Some(&Tok::LParen) {
                        return Err(Error::UnknownIdentifier(name));
                    }
                    self.params.get(&name).map(|&c| Node::Const(c)).ok_or(Error::UnknownIdentifier(name))
                }
            },
            other => Err(Error::Syntax { pos: t.pos, msg: format!("unexpected {other:?}") }),
        }
    }

    /// Linear combination of the vectors `x` and `y`.
    fn lincomb(&mut self) -> Result<LinComb> {
        let mut acc = LinComb { cx: 0.0, cy: 0.0 };
        let mut sign = 1.0;
        if self.peek_kind() == Some(&Tok::Minus) {
            self.pos += 1;
            sign = -1.0;
        }
        loop {
            let mut coef = 1.0;
            let t = self.next()?;
            let var = match t.kind {
                Tok::Num(c) => {
                    coef = c;
                    self.expect(Tok::Star)?;
                    self.vector_name()?
                }
                Tok::Ident(ref name) if name == "x" || name == "y" => name.clone(),
                Tok::Ident(name) => {
                    coef = *self.params.get(&name).ok_or(Error::UnknownIdentifier(name))?;
                    self.expect(Tok::Star)?;
                    self.vector_name()?
                }
                other => {
                    return Err(Error::Syntax { pos: t.pos, msg: format!("expected vector term, found {other:?}") })
                }
            };
            if var == "x" {
                acc.cx += sign * coef;
            } else {
                acc.cy += sign * coef;
            }
            match self.peek_kind() {
                Some(Tok::Plus) => sign = 1.0,
                Some(Tok::Minus) => sign = -1.0,
                _ => return Ok(acc),
            }
            self.pos += 1;
        }
    }

    fn vector_name(&mut self) -> Result<String> {
        let t = self.next()?;
        match t.kind {
            Tok::Ident(name) if name == "x" || name == "y" => Ok(name),
            Tok::Ident(name) => Err(Error::UnknownIdentifier(name)),
            other => Err(Error::Syntax { pos: t.pos, msg: format!("expected x or y, found {other:?}") }),
        }
    }
}
