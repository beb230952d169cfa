//! Expression language for phase-space symbols.
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! expr   := term (("+"|"-") term)*
//! term   := factor (("*"|"/") factor)*
//! factor := ["-"] atom ["^" integer]
//! atom   := number | ident | "(" expr ")" | func "(" expr ")"
//! func   := "sin" | "cos" | "exp"
//! ```
//!
//! Identifiers are either variables `x<i>` / `p<i>` (1-based, `i <= d`) or
//! declared parameter names. Divisors are restricted to subexpressions built
//! from constants and parameters, which keeps the class closed under exact
//! symbolic differentiation with no singularities in the phase variables.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;

use crate::error::SymbolError;
use crate::phase::PhasePoint;

/// Position (`x`) or momentum (`p`) axis of a variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Axis {
    Pos,
    Mom,
}

/// A phase variable `x_i` or `p_i` with 0-based index `i < d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId {
    pub axis: Axis,
    pub index: usize,
}

impl VarId {
    pub fn x(index: usize) -> Self {
        Self {
            axis: Axis::Pos,
            index,
        }
    }

    pub fn p(index: usize) -> Self {
        Self {
            axis: Axis::Mom,
            index,
        }
    }

    /// Flat coordinate in the `(x-block, p-block)` layout.
    pub fn flat(&self, d: usize) -> usize {
        match self.axis {
            Axis::Pos => self.index,
            Axis::Mom => d + self.index,
        }
    }

    /// Inverse of [`VarId::flat`].
    pub fn from_flat(a: usize, d: usize) -> Self {
        if a < d {
            Self::x(a)
        } else {
            Self::p(a - d)
        }
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.axis {
            Axis::Pos => write!(f, "x{}", self.index + 1),
            Axis::Mom => write!(f, "p{}", self.index + 1),
        }
    }
}

/// Built-in unary functions.
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
}

/// Expression AST. Immutable after construction; evaluation is pure.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Param(String),
    Var(VarId),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    /// Divisor is restricted to constant/parameter subtrees.
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, u32),
    Apply(Func, Box<Expr>),
}

/// A complex symbol given as explicit real and imaginary expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSymbol {
    pub re: Expr,
    pub im: Expr,
}

impl ComplexSymbol {
    pub fn new(re: Expr, im: Expr) -> Self {
        Self { re, im }
    }

    /// Purely real symbol.
    pub fn real(re: Expr) -> Self {
        Self {
            re,
            im: Expr::zero(),
        }
    }
}

/// Map from parameter name to bound value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamBindings {
    map: BTreeMap<String, f64>,
}

impl ParamBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: impl Into<String>, value: f64) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.map.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl FromIterator<(String, f64)> for ParamBindings {
    fn from_iter<T: IntoIterator<Item = (String, f64)>>(iter: T) -> Self {
        Self {
            map: iter.into_iter().collect(),
        }
    }
}

// Smart constructors. These fold constant subtrees (and the neutral elements
// 0 and 1) so that repeated differentiation does not blow the tree up.
// They are associated constructors, not operator impls: folding takes the
// operands by value and may return either one.
#[allow(clippy::should_implement_trait)]
impl Expr {
    pub fn zero() -> Expr {
        Expr::Const(0.0)
    }

    pub fn one() -> Expr {
        Expr::Const(1.0)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 1.0)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        match (a, b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
            (a, b) if a.is_zero() => b,
            (a, b) if b.is_zero() => a,
            (a, b) => Expr::Add(Box::new(a), Box::new(b)),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (a, b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
            (a, b) if b.is_zero() => a,
            (a, b) if a.is_zero() => Expr::neg(b),
            (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
        }
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (a, b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
            (a, b) if a.is_zero() || b.is_zero() => Expr::zero(),
            (a, b) if a.is_one() => b,
            (a, b) if b.is_one() => a,
            (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
        }
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        match (a, b) {
            (Expr::Const(x), Expr::Const(y)) => Expr::Const(x / y),
            (a, _) if a.is_zero() => Expr::zero(),
            (a, b) if b.is_one() => a,
            (a, b) => Expr::Div(Box::new(a), Box::new(b)),
        }
    }

    pub fn neg(a: Expr) -> Expr {
        match a {
            Expr::Const(x) => Expr::Const(-x),
            Expr::Neg(inner) => *inner,
            a => Expr::Neg(Box::new(a)),
        }
    }

    pub fn pow(a: Expr, n: u32) -> Expr {
        match (a, n) {
            (_, 0) => Expr::one(),
            (a, 1) => a,
            (Expr::Const(x), n) => Expr::Const(x.powi(n as i32)),
            (a, n) => Expr::Pow(Box::new(a), n),
        }
    }

    pub fn apply(f: Func, a: Expr) -> Expr {
        if let Expr::Const(x) = a {
            return Expr::Const(match f {
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Exp => x.exp(),
            });
        }
        Expr::Apply(f, Box::new(a))
    }

    /// True if any phase variable occurs in the tree.
    pub fn has_variables(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Param(_) => false,
            Expr::Var(_) => true,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Apply(_, a) => a.has_variables(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.has_variables() || b.has_variables()
            }
        }
    }

    /// Exact symbolic partial derivative with respect to `var`.
    pub fn differentiate(&self, var: VarId) -> Expr {
        match self {
            Expr::Const(_) | Expr::Param(_) => Expr::zero(),
            Expr::Var(v) => {
                if *v == var {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Expr::Neg(a) => Expr::neg(a.differentiate(var)),
            Expr::Add(a, b) => Expr::add(a.differentiate(var), b.differentiate(var)),
            Expr::Sub(a, b) => Expr::sub(a.differentiate(var), b.differentiate(var)),
            Expr::Mul(a, b) => Expr::add(
                Expr::mul(a.differentiate(var), (**b).clone()),
                Expr::mul((**a).clone(), b.differentiate(var)),
            ),
            // Parser-produced divisors carry no phase variables, so only the
            // numerator moves; hand-built trees get the full quotient rule.
            Expr::Div(a, b) => {
                if b.has_variables() {
                    Expr::div(
                        Expr::sub(
                            Expr::mul(a.differentiate(var), (**b).clone()),
                            Expr::mul((**a).clone(), b.differentiate(var)),
                        ),
                        Expr::pow((**b).clone(), 2),
                    )
                } else {
                    Expr::div(a.differentiate(var), (**b).clone())
                }
            }
            Expr::Pow(_, 0) => Expr::zero(),
            Expr::Pow(a, n) => Expr::mul(
                Expr::mul(Expr::Const(f64::from(*n)), Expr::pow((**a).clone(), n - 1)),
                a.differentiate(var),
            ),
            Expr::Apply(f, a) => {
                let outer = match f {
                    Func::Sin => Expr::apply(Func::Cos, (**a).clone()),
                    Func::Cos => Expr::neg(Expr::apply(Func::Sin, (**a).clone())),
                    Func::Exp => Expr::apply(Func::Exp, (**a).clone()),
                };
                Expr::mul(outer, a.differentiate(var))
            }
        }
    }

    /// Evaluate at a phase point with the given parameter bindings.
    pub fn evaluate(&self, point: &PhasePoint, bindings: &ParamBindings) -> Result<f64, SymbolError> {
        let v = self.eval_inner(point, bindings)?;
        if !v.is_finite() {
            return Err(SymbolError::NonFiniteValue);
        }
        Ok(v)
    }

    fn eval_inner(&self, point: &PhasePoint, bindings: &ParamBindings) -> Result<f64, SymbolError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Param(name) => bindings
                .get(name)
                .ok_or_else(|| SymbolError::UnboundParam(name.clone()))?,
            Expr::Var(v) => point.coords()[v.flat(point.dof())],
            Expr::Neg(a) => -a.eval_inner(point, bindings)?,
            Expr::Add(a, b) => a.eval_inner(point, bindings)? + b.eval_inner(point, bindings)?,
            Expr::Sub(a, b) => a.eval_inner(point, bindings)? - b.eval_inner(point, bindings)?,
            Expr::Mul(a, b) => a.eval_inner(point, bindings)? * b.eval_inner(point, bindings)?,
            Expr::Div(a, b) => {
                let den = b.eval_inner(point, bindings)?;
                if den == 0.0 {
                    return Err(SymbolError::DivisionByZero);
                }
                a.eval_inner(point, bindings)? / den
            }
            Expr::Pow(a, n) => a.eval_inner(point, bindings)?.powi(*n as i32),
            Expr::Apply(f, a) => {
                let x = a.eval_inner(point, bindings)?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                }
            }
        })
    }
}

// The printer emits fully parenthesized text so that reparsing reproduces the
// tree structurally.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) {
                    // Wrap so the text stays a single factor.
                    write!(f, "(0 - {:?})", -c)
                } else {
                    write!(f, "{c:?}")
                }
            }
            Expr::Param(name) => write!(f, "{name}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => write!(f, "(-({a}))"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, n) => write!(f, "(({a})^{n})"),
            Expr::Apply(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

/// Parse `text` against dimension `d` and the declared parameter names.
pub fn parse(text: &str, d: usize, params: &BTreeSet<String>) -> Result<Expr, SymbolError> {
    Parser {
        src: text.as_bytes(),
        pos: 0,
        d,
        params,
    }
    .parse_root()
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    d: usize,
    params: &'a BTreeSet<String>,
}

impl<'a> Parser<'a> {
    fn parse_root(mut self) -> Result<Expr, SymbolError> {
        let e = self.parse_expr()?;
        self.skip_ws();
        if self.pos != self.src.len() {
            return Err(self.syntax("unexpected trailing input"));
        }
        Ok(e)
    }

    fn syntax(&self, msg: &str) -> SymbolError {
        SymbolError::Syntax {
            pos: self.pos,
            msg: msg.to_string(),
        }
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

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn parse_expr(&mut self) -> Result<Expr, SymbolError> {
        let mut acc = self.parse_term()?;
        loop {
            if self.eat(b'+') {
                acc = Expr::add(acc, self.parse_term()?);
            } else if self.eat(b'-') {
                acc = Expr::sub(acc, self.parse_term()?);
            } else {
                return Ok(acc);
            }
        }
    }

    fn parse_term(&mut self) -> Result<Expr, SymbolError> {
        let mut acc = self.parse_factor()?;
        loop {
            if self.eat(b'*') {
                acc = Expr::mul(acc, self.parse_factor()?);
            } else if self.eat(b'/') {
                let div_pos = self.pos;
                let divisor = self.parse_factor()?;
                if divisor.has_variables() {
                    return Err(SymbolError::NonConstDivisor { pos: div_pos });
                }
                acc = Expr::div(acc, divisor);
            } else {
                return Ok(acc);
            }
        }
    }

    fn parse_factor(&mut self) -> Result<Expr, SymbolError> {
        let negated = self.eat(b'-');
        let atom = self.parse_atom()?;
        let powered = if self.eat(b'^') {
            self.skip_ws();
            let n = self.parse_exponent()?;
            Expr::pow(atom, n)
        } else {
            atom
        };
        Ok(if negated {
            Expr::neg(powered)
        } else {
            powered
        })
    }

    fn parse_exponent(&mut self) -> Result<u32, SymbolError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(SymbolError::BadExponent { pos: start });
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| SymbolError::BadExponent { pos: start })
    }

    fn parse_atom(&mut self) -> Result<Expr, SymbolError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.parse_expr()?;
                if !self.eat(b')') {
                    return Err(self.syntax("expected `)`"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() => self.parse_number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.parse_ident(),
            _ => Err(self.syntax("expected number, identifier, or `(`")),
        }
    }

    fn parse_number(&mut self) -> Result<Expr, SymbolError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if self.pos < self.src.len() && (self.src[self.pos] | 0x20) == b'e' {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-')
            {
                self.pos += 1;
            }
            let digits = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == digits {
                // Not an exponent after all (e.g. an identifier follows).
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| SymbolError::Syntax {
                pos: start,
                msg: format!("invalid number `{text}`"),
            })
    }

    fn parse_ident(&mut self) -> Result<Expr, SymbolError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .to_string();

        // Function application.
        if self.peek() == Some(b'(') {
            if let Some(f) = match name.as_str() {
                "sin" => Some(Func::Sin),
                "cos" => Some(Func::Cos),
                "exp" => Some(Func::Exp),
                _ => None,
            } {
                self.pos += 1;
                let arg = self.parse_expr()?;
                if !self.eat(b')') {
                    return Err(self.syntax("expected `)` after function argument"));
                }
                return Ok(Expr::apply(f, arg));
            }
        }

        if let Some(var) = parse_var_name(&name) {
            if var.index >= self.d {
                return Err(SymbolError::VarIndex {
                    name,
                    d: self.d,
                });
            }
            return Ok(Expr::Var(var));
        }
        if self.params.contains(&name) {
            return Ok(Expr::Param(name));
        }
        Err(SymbolError::UnknownIdent { name, pos: start })
    }
}

/// `x<i>` / `p<i>` with a positive decimal index, e.g. `x1`, `p12`.
fn parse_var_name(name: &str) -> Option<VarId> {
    let (axis, rest) = match name.as_bytes().first()? {
        b'x' => (Axis::Pos, &name[1..]),
        b'p' => (Axis::Mom, &name[1..]),
        _ => return None,
    };
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) || rest.starts_with('0') {
        return None;
    }
    let index: usize = rest.parse().ok()?;
    Some(VarId { axis, index: index - 1 })
}
