//! Arithmetic expression language for vector-field components.
//!
//! Grammar (whitespace is insignificant):
//!
//! ```text
//! expr     = term { ("+" | "-") term } ;
//! term     = unary { ("*" | "/") unary } ;
//! unary    = "-" unary | power ;
//! power    = atom [ "^" exponent ] ;
//! exponent = [ "-" ] integer | "(" [ "-" ] integer ")" ;
//! atom     = number | variable | func "(" expr ")" | "(" expr ")" ;
//! variable = "x" digit { digit } ;            (* x1 .. xd *)
//! func     = "sin" | "cos" | "exp" | "tanh" ;
//! number   = digits [ "." digits ] [ ("e" | "E") [ "+" | "-" ] digits ] ;
//! ```
//!
//! Precedence from tightest: `^`, unary `-`, `* /`, `+ -`. Binary operators
//! are left-associative; `^` does not chain. Exponents are integer
//! literals so every parsed expression is smooth wherever it is defined.

use std::fmt;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Tanh => "tanh",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "tanh" => Some(Func::Tanh),
            _ => None,
        }
    }
}

/// Expression tree node. `Var(k)` refers to coordinate `x_{k+1}`.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(usize),
    Neg(Box<Node>),
    Binary(BinaryOp, Box<Node>, Box<Node>),
    Pow(Box<Node>, i32),
    Call(Func, Box<Node>),
}

/// A parsed expression together with the dimension it was validated against.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprAst {
    root: Node,
    dim: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("variable x{index} at byte {offset} is out of range for dimension {dim}")]
    VariableOutOfRange { index: usize, dim: usize, offset: usize },
    #[error("dimension must be at least 1")]
    ZeroDimension,
}

impl ParseError {
    /// Byte offset of the offending token, when there is one.
    pub fn offset(&self) -> Option<usize> {
        match self {
            ParseError::Syntax { offset, .. }
            | ParseError::UnknownIdentifier { offset, .. }
            | ParseError::VariableOutOfRange { offset, .. } => Some(*offset),
            ParseError::ZeroDimension => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("non-finite value")]
    NonFinite,
    #[error("point has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    End,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = match c {
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'0'..=b'9' | b'.' => {
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
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    offset: start,
                    message: format!("malformed number `{text}`"),
                })?;
                toks.push((Tok::Num(v), start));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                toks.push((Tok::Ident(src[start..i].to_string()), start));
                continue;
            }
            _ => {
                let ch = src[start..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        };
        toks.push((tok, start));
        i += 1;
    }
    toks.push((Tok::End, src.len()));
    Ok(toks)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    dim: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self, what: &str) -> ParseError {
        let found = match self.peek() {
            Tok::End => "end of input".to_string(),
            t => format!("{t:?}"),
        };
        ParseError::Syntax {
            offset: self.offset(),
            message: format!("expected {what}, found {found}"),
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(what))
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinaryOp::Add,
                Tok::Minus => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinaryOp::Mul,
                Tok::Slash => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        if *self.peek() == Tok::Minus {
            self.bump();
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.atom()?;
        if *self.peek() != Tok::Caret {
            return Ok(base);
        }
        self.bump();
        let parens = *self.peek() == Tok::LParen;
        if parens {
            self.bump();
        }
        let negative = *self.peek() == Tok::Minus;
        if negative {
            self.bump();
        }
        let at = self.offset();
        let n = match self.bump().0 {
            Tok::Num(v) if v.fract() == 0.0 && v <= i32::MAX as f64 => v as i32,
            _ => {
                return Err(ParseError::Syntax {
                    offset: at,
                    message: "exponent must be an integer literal".into(),
                })
            }
        };
        if parens {
            self.expect(Tok::RParen, "`)`")?;
        }
        Ok(Node::Pow(Box::new(base), if negative { -n } else { n }))
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        let at = self.offset();
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Node::Const(v))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.bump();
                if let Some(f) = Func::from_name(&name) {
                    self.expect(Tok::LParen, "`(` after function name")?;
                    let arg = self.expr()?;
                    self.expect(Tok::RParen, "`)`")?;
                    return Ok(Node::Call(f, Box::new(arg)));
                }
                let index = name
                    .strip_prefix('x')
                    .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
                    .and_then(|d| d.parse::<usize>().ok());
                match index {
                    Some(k) if (1..=self.dim).contains(&k) => Ok(Node::Var(k - 1)),
                    Some(k) => Err(ParseError::VariableOutOfRange {
                        index: k,
                        dim: self.dim,
                        offset: at,
                    }),
                    None => Err(ParseError::UnknownIdentifier { name, offset: at }),
                }
            }
            _ => Err(self.unexpected("a number, variable, function or `(`")),
        }
    }
}

/// Parses `source` as an expression over `x1..x{dim}`.
pub fn parse_expr(source: &str, dim: usize) -> Result<ExprAst, ParseError> {
    if dim == 0 {
        return Err(ParseError::ZeroDimension);
    }
    let mut p = Parser {
        toks: lex(source)?,
        pos: 0,
        dim,
    };
    let root = p.expr()?;
    if *p.peek() != Tok::End {
        return Err(p.unexpected("operator or end of input"));
    }
    Ok(ExprAst { root, dim })
}

fn eval_node<S: Scalar>(node: &Node, x: &[S]) -> Result<S, EvalError> {
    Ok(match node {
        Node::Const(c) => S::constant(*c),
        Node::Var(k) => x[*k].clone(),
        Node::Neg(a) => -eval_node(a, x)?,
        Node::Binary(op, a, b) => {
            let a = eval_node(a, x)?;
            let b = eval_node(b, x)?;
            match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
                BinaryOp::Div => {
                    if b.value() == 0.0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    a * b.recip()
                }
            }
        }
        Node::Pow(a, n) => {
            let a = eval_node(a, x)?;
            if *n < 0 && a.value() == 0.0 {
                return Err(EvalError::DivisionByZero);
            }
            a.powi(*n)
        }
        Node::Call(f, a) => {
            let a = eval_node(a, x)?;
            match f {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Exp => a.exp(),
                Func::Tanh => a.tanh(),
            }
        }
    })
}

impl ExprAst {
    /// Builds an expression from a tree, validating variable indices.
    pub fn from_node(root: Node, dim: usize) -> Result<ExprAst, ParseError> {
        fn max_var(n: &Node) -> Option<usize> {
            match n {
                Node::Const(_) => None,
                Node::Var(k) => Some(*k),
                Node::Neg(a) | Node::Pow(a, _) | Node::Call(_, a) => max_var(a),
                Node::Binary(_, a, b) => max_var(a).max(max_var(b)),
            }
        }
        if dim == 0 {
            return Err(ParseError::ZeroDimension);
        }
        if let Some(k) = max_var(&root).filter(|&k| k >= dim) {
            return Err(ParseError::VariableOutOfRange {
                index: k + 1,
                dim,
                offset: 0,
            });
        }
        Ok(ExprAst { root, dim })
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Evaluates over any [`Scalar`]; non-finite results are errors.
    pub fn eval<S: Scalar>(&self, point: &[S]) -> Result<S, EvalError> {
        if point.len() != self.dim {
            return Err(EvalError::DimensionMismatch {
                expected: self.dim,
                got: point.len(),
            });
        }
        let v = eval_node(&self.root, point)?;
        if !v.all_finite() {
            return Err(EvalError::NonFinite);
        }
        Ok(v)
    }
}

pub fn eval_expr(ast: &ExprAst, point: &[f64]) -> Result<f64, EvalError> {
    ast.eval(point)
}

fn write_node(n: &Node, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match n {
        Node::Const(c) if c.is_sign_negative() => write!(f, "(-{:?})", -c),
        Node::Const(c) => write!(f, "{c:?}"),
        Node::Var(k) => write!(f, "x{}", k + 1),
        Node::Neg(a) => {
            f.write_str("(-")?;
            write_node(a, f)?;
            f.write_str(")")
        }
        Node::Binary(op, a, b) => {
            let sym = match op {
                BinaryOp::Add => "+",
                BinaryOp::Sub => "-",
                BinaryOp::Mul => "*",
                BinaryOp::Div => "/",
            };
            f.write_str("(")?;
            write_node(a, f)?;
            write!(f, " {sym} ")?;
            write_node(b, f)?;
            f.write_str(")")
        }
        Node::Pow(a, e) => {
            f.write_str("(")?;
            write_node(a, f)?;
            write!(f, "^{e})")
        }
        Node::Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_node(a, f)?;
            f.write_str(")")
        }
    }
}

/// Fully parenthesized form that re-parses to the same evaluation order.
impl fmt::Display for ExprAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(&self.root, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn var(k: usize) -> Box<Node> {
        Box::new(Node::Var(k))
    }

    fn eval_str(s: &str, x: &[f64]) -> Result<f64, EvalError> {
        parse_expr(s, x.len()).unwrap().eval(x)
    }

    #[test]
    fn neg_plus_var() {
        let ast = parse_expr("-x1 + x2", 2).unwrap();
        assert_eq!(
            ast.root(),
            &Node::Binary(BinaryOp::Add, Box::new(Node::Neg(var(0))), var(1))
        );
    }

    #[test]
    fn contraction_component() {
        let ast = parse_expr("-(x1 - 1)", 2).unwrap();
        assert_eq!(
            ast.root(),
            &Node::Neg(Box::new(Node::Binary(
                BinaryOp::Sub,
                var(0),
                Box::new(Node::Const(1.0))
            )))
        );
        assert_eq!(ast.eval(&[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn syntax_error_offset() {
        let err = parse_expr("x1 +* x2", 2).unwrap_err();
        assert!(matches!(err, ParseError::Syntax { offset: 4, .. }), "{err}");
    }

    #[test]
    fn identifier_errors() {
        assert!(matches!(
            parse_expr("y + 1", 2),
            Err(ParseError::UnknownIdentifier { offset: 0, .. })
        ));
        assert!(matches!(
            parse_expr("x1 + x3", 2),
            Err(ParseError::VariableOutOfRange {
                index: 3,
                offset: 5,
                ..
            })
        ));
        assert!(matches!(
            parse_expr("x0", 2),
            Err(ParseError::VariableOutOfRange { index: 0, .. })
        ));
        assert!(matches!(parse_expr("sin x1", 1), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse_expr("(x1", 1), Err(ParseError::Syntax { .. })));
        assert!(matches!(
            parse_expr("x1 x1", 1),
            Err(ParseError::Syntax { offset: 3, .. })
        ));
        assert!(matches!(parse_expr("", 1), Err(ParseError::Syntax { offset: 0, .. })));
        assert!(matches!(
            parse_expr("x1 $ 2", 1),
            Err(ParseError::Syntax { offset: 3, .. })
        ));
    }

    #[test]
    fn exponent_must_be_integer() {
        assert!(matches!(parse_expr("x1^0.5", 1), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse_expr("x1^x1", 1), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse_expr("x1^2^2", 1), Err(ParseError::Syntax { .. })));
        assert_eq!(eval_str("x1^-2", &[2.0]).unwrap(), 0.25);
        assert_eq!(eval_str("x1^(-1)", &[4.0]).unwrap(), 0.25);
        assert_eq!(eval_str("x1^0", &[4.0]).unwrap(), 1.0);
    }

    #[test]
    fn evaluation_examples() {
        assert_eq!(eval_str("-x1+x2", &[1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(eval_str("-(x1-1)", &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(eval_str("x1/x2", &[1.0, 0.0]), Err(EvalError::DivisionByZero));
        assert_eq!(eval_str("x1^-1", &[0.0]), Err(EvalError::DivisionByZero));
        assert_eq!(eval_str("exp(x1)", &[1000.0]), Err(EvalError::NonFinite));
    }

    #[test]
    fn precedence() {
        assert_eq!(eval_str("2+3*4", &[0.0]).unwrap(), 14.0);
        assert_eq!(eval_str("-x1^2", &[2.0]).unwrap(), -4.0);
        assert_eq!(eval_str("8/4/2", &[0.0]).unwrap(), 1.0);
        assert_eq!(eval_str("8-4-2", &[0.0]).unwrap(), 2.0);
        assert_eq!(eval_str("2*-3", &[0.0]).unwrap(), -6.0);
        assert_eq!(eval_str("1.5e1 + .5", &[0.0]).unwrap(), 15.5);
        assert!((eval_str("tanh(x1) + cos(0)", &[0.3]).unwrap() - (0.3f64.tanh() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let ast = parse_expr("x1", 2).unwrap();
        assert_eq!(
            ast.eval(&[1.0]),
            Err(EvalError::DimensionMismatch { expected: 2, got: 1 })
        );
    }

    fn arb_node(dim: usize) -> impl Strategy<Value = Node> {
        let leaf = prop_oneof![
            (0.0f64..10.0).prop_map(Node::Const),
            (-10.0f64..0.0).prop_map(Node::Const),
            (0..dim).prop_map(Node::Var),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Node::Neg(Box::new(a))),
                (inner.clone(), inner.clone(), 0..4usize).prop_map(|(a, b, k)| {
                    let op = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div][k];
                    Node::Binary(op, Box::new(a), Box::new(b))
                }),
                (inner.clone(), -3i32..4).prop_map(|(a, e)| Node::Pow(Box::new(a), e)),
                (inner, 0..4usize).prop_map(|(a, k)| {
                    let f = [Func::Sin, Func::Cos, Func::Exp, Func::Tanh][k];
                    Node::Call(f, Box::new(a))
                }),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_then_parse_evaluates_identically(
            node in arb_node(3),
            points in proptest::collection::vec(proptest::array::uniform3(-3.0f64..3.0), 100),
        ) {
            let ast = ExprAst::from_node(node, 3).unwrap();
            let printed = ast.to_string();
            let reparsed = parse_expr(&printed, 3).unwrap();
            for p in &points {
                let a = ast.eval(p);
                let b = reparsed.eval(p);
                match (a, b) {
                    (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits(), "{}", printed),
                    (a, b) => prop_assert_eq!(a, b),
                }
            }
        }
    }
}
