//! Expression trees for constraint functions over named forecast series.
//!
//! Grammar (whitespace insensitive):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := '-' factor | atom ('^' factor)?
//! atom   := number | identifier | '(' expr ')'
//! ```
//!
//! `^` binds tightest and is right-associative, so `-y^2` is `-(y^2)` and
//! `2^3^2` is `2^(3^2)`. The exponent of `^` must fold to a constant at parse
//! time; `y^x` is rejected. Identifiers (`[A-Za-z_][A-Za-z0-9_]*`) name
//! forecast series and must match CSV column headers exactly.
//!
//! A constraint line has the form `lhs = rhs` and is normalised to the
//! residual expression `lhs - rhs`, so coherent points satisfy `g(y) = 0`.

use std::collections::BTreeSet;
use std::fmt;

/// Binary operators, in the order of the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// A parsed expression tree.
///
/// `Binary(Pow, ..)` always carries a `Constant` right child; the parser
/// enforces this and [`differentiate`] relies on it.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Constant(f64),
    Variable(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

/// Parse-time errors, with byte offsets into the input.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("exponent at byte {offset} does not fold to a constant")]
    NonConstantExponent { offset: usize },
}

/// Evaluation failures. Any non-finite intermediate is an error.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("variable `{0}` is not bound")]
    UnboundVariable(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("zero raised to a negative power")]
    ZeroToNegativePower,
    #[error("expression evaluated to a non-finite value")]
    NonFinite,
}

/// Source of variable values during evaluation.
pub trait Binding {
    fn get(&self, name: &str) -> Option<f64>;
}

impl Binding for std::collections::BTreeMap<String, f64> {
    fn get(&self, name: &str) -> Option<f64> {
        std::collections::BTreeMap::get(self, name).copied()
    }
}

impl Binding for std::collections::HashMap<String, f64> {
    fn get(&self, name: &str) -> Option<f64> {
        std::collections::HashMap::get(self, name).copied()
    }
}

/// Binds a slice of values against a parallel slice of names.
pub struct SliceBinding<'a> {
    pub names: &'a [String],
    pub values: &'a [f64],
}

impl Binding for SliceBinding<'_> {
    fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }
}

impl Expr {
    /// Evaluates the tree with all variables bound.
    pub fn evaluate(&self, binding: &dyn Binding) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Constant(c) => *c,
            Expr::Variable(name) => binding
                .get(name)
                .ok_or_else(|| EvalError::UnboundVariable(name.clone()))?,
            Expr::Neg(inner) => -inner.evaluate(binding)?,
            Expr::Binary(op, lhs, rhs) => {
                let l = lhs.evaluate(binding)?;
                let r = rhs.evaluate(binding)?;
                match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                    BinOp::Div => {
                        if r == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        l / r
                    }
                    BinOp::Pow => {
                        if l == 0.0 && r < 0.0 {
                            return Err(EvalError::ZeroToNegativePower);
                        }
                        pow_value(l, r)
                    }
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite)
        }
    }

    /// The set of variable names appearing in the tree.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_variables(&mut out);
        out
    }

    fn collect_variables(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Constant(_) => {}
            Expr::Variable(name) => {
                out.insert(name.clone());
            }
            Expr::Neg(inner) => inner.collect_variables(out),
            Expr::Binary(_, lhs, rhs) => {
                lhs.collect_variables(out);
                rhs.collect_variables(out);
            }
        }
    }

    /// True when every first partial derivative is a `Constant` node.
    pub fn is_linear(&self) -> bool {
        self.variables()
            .iter()
            .all(|v| matches!(differentiate(self, v), Expr::Constant(_)))
    }
}

/// Integer exponents use `powi` for precision; everything else `powf`.
fn pow_value(base: f64, exp: f64) -> f64 {
    if exp.fract() == 0.0 && exp.abs() <= i32::MAX as f64 {
        base.powi(exp as i32)
    } else {
        base.powf(exp)
    }
}

/// The partial derivative with respect to `wrt`, simplified.
///
/// Simplification folds constant subtrees (only when finite), drops additive
/// and multiplicative identities (`0 + x`, `0 * x`, `1 * x`, `x / 1`,
/// `x ^ 1`, `x ^ 0`), and cancels double negation, so derivatives of linear
/// expressions reduce to `Constant` nodes.
pub fn differentiate(e: &Expr, wrt: &str) -> Expr {
    match e {
        Expr::Constant(_) => Expr::Constant(0.0),
        Expr::Variable(name) => Expr::Constant(if name == wrt { 1.0 } else { 0.0 }),
        Expr::Neg(inner) => neg(differentiate(inner, wrt)),
        Expr::Binary(op, lhs, rhs) => {
            let dl = || differentiate(lhs, wrt);
            let dr = || differentiate(rhs, wrt);
            match op {
                BinOp::Add => add(dl(), dr()),
                BinOp::Sub => sub(dl(), dr()),
                BinOp::Mul => add(
                    mul(dl(), (**rhs).clone()),
                    mul((**lhs).clone(), dr()),
                ),
                // d(u/v) = du/v - u*dv/v^2; the split form keeps each term
                // individually simplifiable.
                BinOp::Div => sub(
                    div(dl(), (**rhs).clone()),
                    div(
                        mul((**lhs).clone(), dr()),
                        pow((**rhs).clone(), Expr::Constant(2.0)),
                    ),
                ),
                BinOp::Pow => {
                    let k = match **rhs {
                        Expr::Constant(k) => k,
                        // Unreachable for parser output; degrade gracefully.
                        _ => return Expr::Constant(f64::NAN),
                    };
                    mul(
                        mul(
                            Expr::Constant(k),
                            pow((**lhs).clone(), Expr::Constant(k - 1.0)),
                        ),
                        dl(),
                    )
                }
            }
        }
    }
}

fn as_const(e: &Expr) -> Option<f64> {
    match e {
        Expr::Constant(c) => Some(*c),
        _ => None,
    }
}

fn add(l: Expr, r: Expr) -> Expr {
    if let (Some(a), Some(b)) = (as_const(&l), as_const(&r)) {
        if (a + b).is_finite() {
            return Expr::Constant(a + b);
        }
    }
    if as_const(&l) == Some(0.0) {
        return r;
    }
    if as_const(&r) == Some(0.0) {
        return l;
    }
    Expr::Binary(BinOp::Add, Box::new(l), Box::new(r))
}

fn sub(l: Expr, r: Expr) -> Expr {
    if let (Some(a), Some(b)) = (as_const(&l), as_const(&r)) {
        if (a - b).is_finite() {
            return Expr::Constant(a - b);
        }
    }
    if as_const(&r) == Some(0.0) {
        return l;
    }
    if as_const(&l) == Some(0.0) {
        return neg(r);
    }
    Expr::Binary(BinOp::Sub, Box::new(l), Box::new(r))
}

fn mul(l: Expr, r: Expr) -> Expr {
    if let (Some(a), Some(b)) = (as_const(&l), as_const(&r)) {
        if (a * b).is_finite() {
            return Expr::Constant(a * b);
        }
    }
    if as_const(&l) == Some(0.0) || as_const(&r) == Some(0.0) {
        return Expr::Constant(0.0);
    }
    if as_const(&l) == Some(1.0) {
        return r;
    }
    if as_const(&r) == Some(1.0) {
        return l;
    }
    Expr::Binary(BinOp::Mul, Box::new(l), Box::new(r))
}

fn div(l: Expr, r: Expr) -> Expr {
    if let (Some(a), Some(b)) = (as_const(&l), as_const(&r)) {
        if b != 0.0 && (a / b).is_finite() {
            return Expr::Constant(a / b);
        }
    }
    if as_const(&l) == Some(0.0) {
        return Expr::Constant(0.0);
    }
    if as_const(&r) == Some(1.0) {
        return l;
    }
    Expr::Binary(BinOp::Div, Box::new(l), Box::new(r))
}

fn pow(base: Expr, exp: Expr) -> Expr {
    let k = as_const(&exp).expect("pow exponent is always constant");
    if k == 0.0 {
        return Expr::Constant(1.0);
    }
    if k == 1.0 {
        return base;
    }
    if let Some(b) = as_const(&base) {
        let v = pow_value(b, k);
        if v.is_finite() {
            return Expr::Constant(v);
        }
    }
    Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exp))
}

fn neg(e: Expr) -> Expr {
    match e {
        Expr::Constant(c) => Expr::Constant(-c),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

/// Parses a single expression.
pub fn parse_expression(text: &str) -> Result<Expr, ParseError> {
    let mut p = Parser::new(text);
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.bytes.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e)
}

/// Parses a constraint line `lhs = rhs` into the residual `lhs - rhs`.
///
/// Exactly one `=` is required; the residual is zero at coherent points.
pub fn parse_constraint(text: &str) -> Result<Expr, ParseError> {
    let mut split = text.splitn(2, '=');
    let lhs_text = split.next().unwrap_or("");
    let rhs_text = match split.next() {
        Some(t) => t,
        None => {
            return Err(ParseError::Syntax {
                offset: text.len(),
                message: "constraint must contain `=`".into(),
            })
        }
    };
    if rhs_text.contains('=') {
        return Err(ParseError::Syntax {
            offset: lhs_text.len() + 1 + rhs_text.find('=').unwrap(),
            message: "constraint must contain exactly one `=`".into(),
        });
    }
    let lhs = parse_expression(lhs_text)?;
    let rhs = parse_expression(rhs_text).map_err(|e| shift_offset(e, lhs_text.len() + 1))?;
    Ok(sub(lhs, rhs))
}

fn shift_offset(e: ParseError, by: usize) -> ParseError {
    match e {
        ParseError::Syntax { offset, message } => ParseError::Syntax {
            offset: offset + by,
            message,
        },
        ParseError::NonConstantExponent { offset } => {
            ParseError::NonConstantExponent { offset: offset + by }
        }
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser {
            bytes: text.as_bytes(),
            pos: 0,
        }
    }

    fn err(&self, message: &str) -> ParseError {
        ParseError::Syntax {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = Expr::Binary(BinOp::Add, Box::new(acc), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = Expr::Binary(BinOp::Sub, Box::new(acc), Box::new(self.term()?));
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.factor()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    acc = Expr::Binary(BinOp::Mul, Box::new(acc), Box::new(self.factor()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    acc = Expr::Binary(BinOp::Div, Box::new(acc), Box::new(self.factor()?));
                }
                _ => return Ok(acc),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let exp_offset = self.pos;
            let exp = self.factor()?;
            let folded = exp
                .evaluate(&EmptyBinding)
                .map_err(|_| ParseError::NonConstantExponent { offset: exp_offset })?;
            return Ok(Expr::Binary(
                BinOp::Pow,
                Box::new(base),
                Box::new(Expr::Constant(folded)),
            ));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            Some(_) => Err(self.err("expected number, identifier, `(` or `-`")),
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.bytes.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            if !self
                .bytes
                .get(self.pos)
                .is_some_and(|b| b.is_ascii_digit())
            {
                return Err(self.err("expected digits after decimal point"));
            }
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if matches!(self.bytes.get(self.pos), Some(b'e') | Some(b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.bytes.get(self.pos), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            if self
                .bytes
                .get(self.pos)
                .is_some_and(|b| b.is_ascii_digit())
            {
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                // `e` starts an identifier, not an exponent: back off.
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
            offset: start,
            message: format!("invalid number `{text}`"),
        })?;
        Ok(Expr::Constant(value))
    }

    fn identifier(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_alphanumeric() || *b == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        Ok(Expr::Variable(name.to_string()))
    }
}

struct EmptyBinding;

impl Binding for EmptyBinding {
    fn get(&self, _: &str) -> Option<f64> {
        None
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(self, f, 0)
    }
}

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Constant(_) | Expr::Variable(_) => 4,
        Expr::Binary(BinOp::Pow, _, _) => 3,
        Expr::Neg(_) => 2,
        Expr::Binary(BinOp::Mul, _, _) | Expr::Binary(BinOp::Div, _, _) => 1,
        Expr::Binary(BinOp::Add, _, _) | Expr::Binary(BinOp::Sub, _, _) => 0,
    }
}

fn write_expr(e: &Expr, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
    let prec = precedence(e);
    let parens = prec < min_prec;
    if parens {
        write!(f, "(")?;
    }
    match e {
        Expr::Constant(c) => {
            if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) {
                write!(f, "({c})")?;
            } else {
                write!(f, "{c}")?;
            }
        }
        Expr::Variable(name) => write!(f, "{name}")?,
        Expr::Neg(inner) => {
            write!(f, "-")?;
            write_expr(inner, f, 3)?;
        }
        Expr::Binary(op, lhs, rhs) => {
            let (symbol, lp, rp) = match op {
                BinOp::Add => (" + ", 0, 0),
                // Right operand of `-` and `/` needs strictly higher binding.
                BinOp::Sub => (" - ", 0, 1),
                BinOp::Mul => (" * ", 1, 1),
                BinOp::Div => (" / ", 1, 2),
                BinOp::Pow => ("^", 4, 3),
            };
            write_expr(lhs, f, lp)?;
            write!(f, "{symbol}")?;
            write_expr(rhs, f, rp)?;
        }
    }
    if parens {
        write!(f, ")")?;
    }
    Ok(())
}
