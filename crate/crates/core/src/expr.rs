//! Small closed-form expression language for structural mechanisms and noise
//! transforms, e.g. `tanh(W) + 0.5 * Z^2 + u`.
//!
//! Grammar: numbers, variables, `+ - * / ^`, unary minus, parentheses and
//! the functions listed in [`Func`]. `^` is right associative.

use std::fmt;

use thiserror::Error;

use crate::sampler::{inverse_normal_cdf, normal_cdf};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExprError {
    #[error("unexpected character {0:?} at {1}")]
    UnexpectedChar(char, usize),
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("unexpected token at {0}")]
    UnexpectedToken(usize),
    #[error("unknown function {0:?}")]
    UnknownFunction(String),
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Ln,
    Sqrt,
    Cbrt,
    Tanh,
    Atanh,
    Abs,
    Sigmoid,
    Logit,
    /// Standard normal CDF.
    Phi,
    /// Standard normal quantile.
    Probit,
}

impl Func {
    fn parse(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "ln" | "log" => Func::Ln,
            "sqrt" => Func::Sqrt,
            "cbrt" => Func::Cbrt,
            "tanh" => Func::Tanh,
            "atanh" => Func::Atanh,
            "abs" => Func::Abs,
            "sigmoid" => Func::Sigmoid,
            "logit" => Func::Logit,
            "phi" => Func::Phi,
            "probit" => Func::Probit,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
            Func::Cbrt => "cbrt",
            Func::Tanh => "tanh",
            Func::Atanh => "atanh",
            Func::Abs => "abs",
            Func::Sigmoid => "sigmoid",
            Func::Logit => "logit",
            Func::Phi => "phi",
            Func::Probit => "probit",
        }
    }

    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Tan => x.tan(),
            Func::Exp => x.exp(),
            Func::Ln => x.ln(),
            Func::Sqrt => x.sqrt(),
            Func::Cbrt => x.cbrt(),
            Func::Tanh => x.tanh(),
            Func::Atanh => x.atanh(),
            Func::Abs => x.abs(),
            Func::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Func::Logit => (x / (T::one() - x)).ln(),
            Func::Phi => T::lit(normal_cdf(x.as_f64())),
            Func::Probit => T::lit(inverse_normal_cdf(x.as_f64())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// A parsed expression with variables resolved to slot indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Expr {
    /// Parses `source`; each identifier must be one of `vars`, whose position
    /// becomes the slot read by [`Expr::eval`].
    pub fn parse(source: &str, vars: &[&str]) -> Result<Expr, ExprError> {
        let tokens = lex(source)?;
        let mut p = Parser {
            tokens: &tokens,
            pos: 0,
            vars,
        };
        let root = p.expr()?;
        if p.pos != tokens.len() {
            return Err(ExprError::UnexpectedToken(tokens[p.pos].1));
        }
        Ok(Expr {
            source: source.to_owned(),
            root,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval<T: Real>(&self, slots: &[T]) -> T {
        eval(&self.root, slots)
    }

    /// Function names understood by the parser.
    pub fn functions() -> impl Iterator<Item = &'static str> {
        [
            Func::Sin,
            Func::Cos,
            Func::Tan,
            Func::Exp,
            Func::Ln,
            Func::Sqrt,
            Func::Cbrt,
            Func::Tanh,
            Func::Atanh,
            Func::Abs,
            Func::Sigmoid,
            Func::Logit,
            Func::Phi,
            Func::Probit,
        ]
        .into_iter()
        .map(Func::name)
    }
}

fn eval<T: Real>(node: &Node, slots: &[T]) -> T {
    match node {
        Node::Num(v) => T::lit(*v),
        Node::Var(i) => slots[*i],
        Node::Neg(a) => -eval(a, slots),
        Node::Bin(op, a, b) => {
            let (x, y) = (eval(a, slots), eval(b, slots));
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
                BinOp::Pow => {
                    // integer powers keep the sign of negative bases
                    if y.fract() == T::zero() && y.abs() <= T::lit(64.0) {
                        x.powi(y.to_i32().expect("small integer"))
                    } else {
                        x.powf(y)
                    }
                }
            }
        }
        Node::Call(f, a) => f.apply(eval(a, slots)),
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

fn lex(s: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
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
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| ExprError::UnexpectedChar(c, start))?;
            out.push((Tok::Num(v), start));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), start));
        } else if "+-*/^".contains(c) {
            out.push((Tok::Op(c), i));
            i += 1;
        } else if c == '(' {
            out.push((Tok::LParen, i));
            i += 1;
        } else if c == ')' {
            out.push((Tok::RParen, i));
            i += 1;
        } else {
            return Err(ExprError::UnexpectedChar(c, i));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: &'a [(Tok, usize)],
    pos: usize,
    vars: &'a [&'a str],
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.0)
    }

    fn next(&mut self) -> Result<&(Tok, usize), ExprError> {
        let t = self.tokens.get(self.pos).ok_or(ExprError::UnexpectedEnd)?;
        self.pos += 1;
        Ok(t)
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let (tok, at) = self.next()?.clone();
        match tok {
            Tok::Num(v) => Ok(Node::Num(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                match self.next()? {
                    (Tok::RParen, _) => Ok(inner),
                    (_, at) => Err(ExprError::UnexpectedToken(*at)),
                }
            }
            Tok::Ident(name) => {
                if let Some(Tok::LParen) = self.peek() {
                    let f = Func::parse(&name).ok_or(ExprError::UnknownFunction(name))?;
                    self.pos += 1;
                    let arg = self.expr()?;
                    match self.next()? {
                        (Tok::RParen, _) => Ok(Node::Call(f, Box::new(arg))),
                        (_, at) => Err(ExprError::UnexpectedToken(*at)),
                    }
                } else if name == "pi" && !self.vars.contains(&"pi") {
                    Ok(Node::Num(std::f64::consts::PI))
                } else {
                    self.vars
                        .iter()
                        .position(|v| *v == name)
                        .map(Node::Var)
                        .ok_or(ExprError::UnknownVariable(name))
                }
            }
            _ => Err(ExprError::UnexpectedToken(at)),
        }
    }
}
