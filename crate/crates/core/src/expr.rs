//! The metric-component expression language.
//!
//! Grammar (whitespace insignificant):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' '-'? INTEGER)?
//! atom   := NUMBER | IDENT | FUNC '(' expr ')' | '(' expr ')'
//! FUNC   := sqrt | exp | log | sin | cos | tan | sinh | cosh
//! ```
//!
//! Exponents are integer literals only; `-x^2` parses as `-(x^2)`.

use std::fmt;

use thiserror::Error;

use crate::jet::Jet3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Func {
    Sqrt,
    Exp,
    Log,
    Sin,
    Cos,
    Tan,
    Sinh,
    Cosh,
}

impl Func {
    pub const ALL: [Func; 8] = [
        Func::Sqrt,
        Func::Exp,
        Func::Log,
        Func::Sin,
        Func::Cos,
        Func::Tan,
        Func::Sinh,
        Func::Cosh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sqrt => "sqrt",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Sinh => "sinh",
            Func::Cosh => "cosh",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("column {column}: {message}")]
pub struct ParseError {
    /// 1-based character column within the expression text.
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unknown identifier `{0}`")]
    UnknownIdentifier(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("{func} argument {arg} outside its domain")]
    Domain { func: &'static str, arg: f64 },
    #[error("non-finite intermediate value")]
    NonFinite,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ParseError> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens, pos: 0, end_col: src.chars().count() + 1 };
        let e = p.expr()?;
        match p.peek() {
            None => Ok(e),
            Some(t) => Err(ParseError { column: t.col, message: format!("unexpected {}", t.kind) }),
        }
    }

    /// Every identifier referenced (in order of first appearance).
    pub fn identifiers(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_vars(&mut |v| {
            if !out.iter().any(|o: &String| o == v) {
                out.push(v.to_string());
            }
        });
        out
    }

    fn visit_vars(&self, f: &mut impl FnMut(&str)) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => f(v),
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.visit_vars(f),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.visit_vars(f);
                b.visit_vars(f);
            }
        }
    }

    /// Evaluates over jets; `lookup` resolves identifiers. `dim` is the jet
    /// dimension used for literals.
    pub fn eval_jet(
        &self,
        dim: usize,
        lookup: &dyn Fn(&str) -> Option<Jet3>,
    ) -> Result<Jet3, EvalError> {
        let out = match self {
            Expr::Num(x) => Jet3::constant(dim, *x),
            Expr::Var(v) => lookup(v).ok_or_else(|| EvalError::UnknownIdentifier(v.clone()))?,
            Expr::Neg(a) => -a.eval_jet(dim, lookup)?,
            Expr::Add(a, b) => a.eval_jet(dim, lookup)? + b.eval_jet(dim, lookup)?,
            Expr::Sub(a, b) => a.eval_jet(dim, lookup)? - b.eval_jet(dim, lookup)?,
            Expr::Mul(a, b) => a.eval_jet(dim, lookup)? * b.eval_jet(dim, lookup)?,
            Expr::Div(a, b) => {
                let den = b.eval_jet(dim, lookup)?;
                if den.value() == 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                a.eval_jet(dim, lookup)? / den
            }
            Expr::Pow(a, n) => {
                let base = a.eval_jet(dim, lookup)?;
                if *n < 0 && base.value() == 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                base.powi(*n)
            }
            Expr::Call(f, a) => {
                let u = a.eval_jet(dim, lookup)?;
                let x = u.value();
                match f {
                    Func::Sqrt if x < 0.0 || (x == 0.0 && dim > 0) => {
                        return Err(EvalError::Domain { func: "sqrt", arg: x })
                    }
                    Func::Log if x <= 0.0 => return Err(EvalError::Domain { func: "log", arg: x }),
                    _ => {}
                }
                match f {
                    Func::Sqrt => u.sqrt(),
                    Func::Exp => u.exp(),
                    Func::Log => u.ln(),
                    Func::Sin => u.sin(),
                    Func::Cos => u.cos(),
                    Func::Tan => u.tan(),
                    Func::Sinh => u.sinh(),
                    Func::Cosh => u.cosh(),
                }
            }
        };
        if !out.value().is_finite() {
            return Err(EvalError::NonFinite);
        }
        Ok(out)
    }

    /// Plain evaluation; agrees with the value field of [`Expr::eval_jet`].
    pub fn eval(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<f64, EvalError> {
        self.eval_jet(0, &|v| lookup(v).map(|x| Jet3::constant(0, x)))
            .map(|j| j.value())
    }

    fn prec(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            Expr::Num(_) | Expr::Var(_) | Expr::Call(..) => 5,
        }
    }
}

fn write_at(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    if e.prec() < min_prec {
        write!(f, "(")?;
        write!(f, "{e}")?;
        write!(f, ")")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(x) => write!(f, "{x}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => {
                write!(f, "-")?;
                write_at(f, a, 3)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                write_at(f, a, 1)?;
                write!(f, " {} ", if matches!(self, Expr::Add(..)) { '+' } else { '-' })?;
                write_at(f, b, 2)
            }
            Expr::Mul(a, b) | Expr::Div(a, b) => {
                write_at(f, a, 2)?;
                write!(f, " {} ", if matches!(self, Expr::Mul(..)) { '*' } else { '/' })?;
                write_at(f, b, 3)
            }
            Expr::Pow(a, n) => {
                write_at(f, a, 5)?;
                write!(f, "^{n}")
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64, bool),
    Ident(String),
    Op(char),
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(x, _) => write!(f, "number {x}"),
            Tok::Ident(s) => write!(f, "identifier `{s}`"),
            Tok::Op(c) => write!(f, "`{c}`"),
        }
    }
}

#[derive(Clone, Debug)]
struct Token {
    kind: Tok,
    col: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            let mut integral = true;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                integral = false;
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    integral = false;
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                } else {
                    return Err(ParseError { column: i + 1, message: "malformed exponent in number".into() });
                }
            }
            let text: String = chars[start..i].iter().collect();
            let x: f64 = text
                .parse()
                .map_err(|_| ParseError { column: col, message: format!("bad number `{text}`") })?;
            if !x.is_finite() {
                return Err(ParseError { column: col, message: format!("number `{text}` out of range") });
            }
            out.push(Token { kind: Tok::Num(x, integral), col });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token { kind: Tok::Ident(chars[start..i].iter().collect()), col });
        } else if "+-*/^()".contains(c) {
            out.push(Token { kind: Tok::Op(c), col });
            i += 1;
        } else {
            return Err(ParseError { column: col, message: format!("unexpected character `{c}`") });
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    end_col: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn peek_op(&self) -> Option<char> {
        match self.peek() {
            Some(Token { kind: Tok::Op(c), .. }) => Some(*c),
            _ => None,
        }
    }

    fn here(&self) -> usize {
        self.peek().map_or(self.end_col, |t| t.col)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError { column: self.here(), message: message.into() })
    }

    fn expect_op(&mut self, c: char) -> Result<(), ParseError> {
        if self.peek_op() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            match self.peek() {
                Some(t) => self.err(format!("expected `{c}`, found {}", t.kind)),
                None => self.err(format!("expected `{c}`, found end of input")),
            }
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(c @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if c == '+' {
                Expr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(c @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if c == '*' {
                Expr::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek_op() == Some('-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek_op() != Some('^') {
            return Ok(base);
        }
        self.pos += 1;
        let negative = if self.peek_op() == Some('-') {
            self.pos += 1;
            true
        } else {
            false
        };
        let n = match self.peek() {
            Some(Token { kind: Tok::Num(x, true), .. }) if *x <= i32::MAX as f64 => *x as i32,
            Some(Token { kind: Tok::Num(..), .. }) => return self.err("exponent must be an integer literal"),
            _ => return self.err("expected integer exponent after `^`"),
        };
        self.pos += 1;
        if self.peek_op() == Some('^') {
            return self.err("chained `^` is not allowed; use parentheses");
        }
        Ok(Expr::Pow(Box::new(base), if negative { -n } else { n }))
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let Some(tok) = self.peek().cloned() else {
            return self.err("unexpected end of input");
        };
        match tok.kind {
            Tok::Num(x, _) => {
                self.pos += 1;
                Ok(Expr::Num(x))
            }
            Tok::Ident(name) => {
                self.pos += 1;
                if let Some(func) = Func::from_name(&name) {
                    if self.peek_op() != Some('(') {
                        return self.err(format!("function `{name}` needs a parenthesized argument"));
                    }
                    self.pos += 1;
                    let arg = self.expr()?;
                    self.expect_op(')')?;
                    Ok(Expr::Call(func, Box::new(arg)))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            Tok::Op('(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect_op(')')?;
                Ok(e)
            }
            Tok::Op(c) => self.err(format!("unexpected `{c}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Expr {
        Expr::parse(s).unwrap()
    }

    #[test]
    fn precedence() {
        assert_eq!(p("-x^2"), Expr::Neg(Box::new(Expr::Pow(Box::new(Expr::Var("x".into())), 2))));
        assert_eq!(p("1-2-3").to_string(), "1 - 2 - 3");
        assert_eq!(p("1-(2-3)").to_string(), "1 - (2 - 3)");
        assert_eq!(p("a/(b*c)").to_string(), "a / (b * c)");
        assert_eq!(p("(-x)^3").to_string(), "(-x)^3");
        assert_eq!(p("x^-2").to_string(), "x^-2");
    }

    #[test]
    fn errors_are_located() {
        let e = Expr::parse("1 + $").unwrap_err();
        assert_eq!(e.column, 5);
        let e = Expr::parse("sin x").unwrap_err();
        assert_eq!(e.column, 5);
        let e = Expr::parse("x^2.5").unwrap_err();
        assert_eq!(e.column, 3);
        let e = Expr::parse("(1 + 2").unwrap_err();
        assert_eq!(e.column, 7);
        assert!(Expr::parse("x^2^3").is_err());
        assert!(Expr::parse("").is_err());
        assert!(Expr::parse("1e").is_err());
    }

    #[test]
    fn evaluation() {
        let e = p("1/(1-q1*q1-q2*q2) * (1-q2*q2)");
        let v = e
            .eval(&|n| match n {
                "q1" => Some(0.6),
                "q2" => Some(0.0),
                _ => None,
            })
            .unwrap();
        assert!((v - 1.5625).abs() < 1e-15);
        assert_eq!(p("log(0)").eval(&|_| None), Err(EvalError::Domain { func: "log", arg: 0.0 }));
        assert_eq!(p("1/(2-2)").eval(&|_| None), Err(EvalError::DivisionByZero));
        assert_eq!(p("y").eval(&|_| None), Err(EvalError::UnknownIdentifier("y".into())));
    }
}
