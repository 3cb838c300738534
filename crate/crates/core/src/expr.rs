//! Symbolic expression DAG with forward-mode differentiation.
//!
//! Every joint transform, forward-kinematics chain and task space in the crate
//! is an [`Expr`]. Expressions are immutable and reference-counted, so shared
//! subexpressions are shared nodes. [`compile`] flattens a set of expressions
//! into a [`CompiledFn`] tape for fast repeated evaluation in the control loop.

use std::collections::HashMap;
use std::fmt;
use std::ops;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Guard used in the derivative of `sqrt` so that `d sqrt(a)` stays finite at `a == 0`.
const SQRT_DERIVATIVE_FLOOR: f64 = 1e-24;
/// Guard used in the derivative of `acos` at the ends of the clamped domain.
const ACOS_DERIVATIVE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("symbol `{name}` of kind {kind:?} is already registered")]
    DuplicateSymbol { name: String, kind: SymbolKind },
    #[error("derivative symbols are created together with their position symbol (`{0}`)")]
    DerivativeRegistration(String),
    #[error("free symbol {0} is not among the compiled inputs")]
    FreeSymbol(String),
    #[error("no value assigned to symbol {0}")]
    MissingSymbol(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SymbolKind {
    DofPosition,
    DofVelocity,
    DofAcceleration,
    DofJerk,
    Virtual,
}

/// A named scalar variable. Identity is the registry-assigned id.
#[derive(Clone, Debug)]
pub struct Symbol {
    id: u32,
    name: Arc<str>,
    kind: SymbolKind,
}

impl Symbol {
    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> SymbolKind {
        self.kind
    }

    pub fn is_controllable(&self) -> bool {
        self.kind != SymbolKind::Virtual
    }
}

impl PartialEq for Symbol {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Eq for Symbol {}

impl std::hash::Hash for Symbol {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.id.hash(state)
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            SymbolKind::DofPosition | SymbolKind::Virtual => write!(f, "{}", self.name),
            SymbolKind::DofVelocity => write!(f, "{}'", self.name),
            SymbolKind::DofAcceleration => write!(f, "{}''", self.name),
            SymbolKind::DofJerk => write!(f, "{}'''", self.name),
        }
    }
}

/// The four symbols registered for one degree of freedom.
#[derive(Clone, Debug)]
pub struct DofSymbols {
    pub position: Symbol,
    pub velocity: Symbol,
    pub acceleration: Symbol,
    pub jerk: Symbol,
}

/// Owns symbol identities. Ids are dense and start at zero.
#[derive(Clone, Debug, Default)]
pub struct SymbolRegistry {
    symbols: Vec<Symbol>,
    by_key: HashMap<(String, SymbolKind), u32>,
}

impl SymbolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, kind: SymbolKind) -> Symbol {
        let symbol = Symbol {
            id: self.symbols.len() as u32,
            name: Arc::from(name),
            kind,
        };
        self.by_key.insert((name.to_string(), kind), symbol.id);
        self.symbols.push(symbol.clone());
        symbol
    }

    fn check_free(&self, name: &str, kind: SymbolKind) -> Result<(), ExprError> {
        if self.by_key.contains_key(&(name.to_string(), kind)) {
            return Err(ExprError::DuplicateSymbol {
                name: name.to_string(),
                kind,
            });
        }
        Ok(())
    }

    /// Registers a symbol and returns it as an expression.
    ///
    /// Registering a `DofPosition` also registers its velocity, acceleration
    /// and jerk siblings; derivative kinds cannot be registered on their own.
    pub fn make_symbol(&mut self, name: &str, kind: SymbolKind) -> Result<Expr, ExprError> {
        match kind {
            SymbolKind::DofPosition => Ok(Expr::symbol(&self.make_dof(name)?.position)),
            SymbolKind::Virtual => {
                self.check_free(name, kind)?;
                Ok(Expr::symbol(&self.insert(name, kind)))
            }
            _ => Err(ExprError::DerivativeRegistration(name.to_string())),
        }
    }

    pub fn make_dof(&mut self, name: &str) -> Result<DofSymbols, ExprError> {
        for kind in [
            SymbolKind::DofPosition,
            SymbolKind::DofVelocity,
            SymbolKind::DofAcceleration,
            SymbolKind::DofJerk,
        ] {
            self.check_free(name, kind)?;
        }
        Ok(DofSymbols {
            position: self.insert(name, SymbolKind::DofPosition),
            velocity: self.insert(name, SymbolKind::DofVelocity),
            acceleration: self.insert(name, SymbolKind::DofAcceleration),
            jerk: self.insert(name, SymbolKind::DofJerk),
        })
    }

    pub fn make_virtual(&mut self, name: &str) -> Result<Symbol, ExprError> {
        self.check_free(name, SymbolKind::Virtual)?;
        Ok(self.insert(name, SymbolKind::Virtual))
    }

    pub fn get(&self, name: &str, kind: SymbolKind) -> Option<&Symbol> {
        self.by_key
            .get(&(name.to_string(), kind))
            .map(|&id| &self.symbols[id as usize])
    }

    pub fn by_id(&self, id: u32) -> Option<&Symbol> {
        self.symbols.get(id as usize)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Symbol> {
        self.symbols.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Sqrt,
    Abs,
    /// Input clamped to `[-1, 1]`.
    Acos,
    /// Natural logarithm; only produced by the derivative of `pow` with a non-constant exponent.
    Ln,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
    Atan2,
    Pow,
}

#[derive(Debug)]
enum Node {
    Const(f64),
    Sym(Symbol),
    Unary(UnaryOp, Expr),
    Binary(BinaryOp, Expr, Expr),
    /// `if lhs <= rhs { then } else { otherwise }`; produced only by derivatives of
    /// `min`, `max` and `abs`, where ties take the left branch.
    SelectLe(Expr, Expr, Expr, Expr),
}

/// A scalar expression node.
#[derive(Clone, Debug)]
pub struct Expr(Arc<Node>);

fn apply_unary(op: UnaryOp, x: f64) -> f64 {
    match op {
        UnaryOp::Neg => -x,
        UnaryOp::Sin => x.sin(),
        UnaryOp::Cos => x.cos(),
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::Abs => x.abs(),
        UnaryOp::Acos => x.clamp(-1.0, 1.0).acos(),
        UnaryOp::Ln => x.ln(),
    }
}

fn apply_binary(op: BinaryOp, a: f64, b: f64) -> f64 {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => a / b,
        BinaryOp::Min => {
            if a <= b {
                a
            } else {
                b
            }
        }
        BinaryOp::Max => {
            if a >= b {
                a
            } else {
                b
            }
        }
        BinaryOp::Atan2 => a.atan2(b),
        BinaryOp::Pow => a.powf(b),
    }
}

impl Expr {
    pub fn constant(value: f64) -> Self {
        Expr(Arc::new(Node::Const(value)))
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn one() -> Self {
        Self::constant(1.0)
    }

    pub fn symbol(symbol: &Symbol) -> Self {
        Expr(Arc::new(Node::Sym(symbol.clone())))
    }

    pub fn as_constant(&self) -> Option<f64> {
        match *self.0 {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_symbol(&self) -> Option<&Symbol> {
        match &*self.0 {
            Node::Sym(s) => Some(s),
            _ => None,
        }
    }

    fn is_const(&self, value: f64) -> bool {
        self.as_constant() == Some(value)
    }

    fn ptr(&self) -> *const Node {
        Arc::as_ptr(&self.0)
    }

    pub fn unary(op: UnaryOp, a: Expr) -> Self {
        if let Some(c) = a.as_constant() {
            return Self::constant(apply_unary(op, c));
        }
        if op == UnaryOp::Neg {
            if let Node::Unary(UnaryOp::Neg, inner) = &*a.0 {
                return inner.clone();
            }
        }
        Expr(Arc::new(Node::Unary(op, a)))
    }

    pub fn binary(op: BinaryOp, a: Expr, b: Expr) -> Self {
        if let (Some(x), Some(y)) = (a.as_constant(), b.as_constant()) {
            return Self::constant(apply_binary(op, x, y));
        }
        match op {
            BinaryOp::Add if a.is_const(0.0) => return b,
            BinaryOp::Add | BinaryOp::Sub if b.is_const(0.0) => return a,
            BinaryOp::Sub if a.is_const(0.0) => return -b,
            BinaryOp::Mul if a.is_const(0.0) || b.is_const(0.0) => return Self::zero(),
            BinaryOp::Mul if a.is_const(1.0) => return b,
            BinaryOp::Mul | BinaryOp::Div if b.is_const(1.0) => return a,
            BinaryOp::Div if a.is_const(0.0) => return Self::zero(),
            _ => {}
        }
        Expr(Arc::new(Node::Binary(op, a, b)))
    }

    fn select_le(lhs: Expr, rhs: Expr, then: Expr, otherwise: Expr) -> Self {
        if let (Some(l), Some(r)) = (lhs.as_constant(), rhs.as_constant()) {
            return if l <= r { then } else { otherwise };
        }
        if then.ptr() == otherwise.ptr() {
            return then;
        }
        Expr(Arc::new(Node::SelectLe(lhs, rhs, then, otherwise)))
    }

    pub fn sin(&self) -> Self {
        Self::unary(UnaryOp::Sin, self.clone())
    }

    pub fn cos(&self) -> Self {
        Self::unary(UnaryOp::Cos, self.clone())
    }

    pub fn sqrt(&self) -> Self {
        Self::unary(UnaryOp::Sqrt, self.clone())
    }

    pub fn abs(&self) -> Self {
        Self::unary(UnaryOp::Abs, self.clone())
    }

    pub fn acos(&self) -> Self {
        Self::unary(UnaryOp::Acos, self.clone())
    }

    pub fn ln(&self) -> Self {
        Self::unary(UnaryOp::Ln, self.clone())
    }

    pub fn min(&self, other: &Expr) -> Self {
        Self::binary(BinaryOp::Min, self.clone(), other.clone())
    }

    pub fn max(&self, other: &Expr) -> Self {
        Self::binary(BinaryOp::Max, self.clone(), other.clone())
    }

    /// `atan2(self, x)`, with `self` as the y argument.
    pub fn atan2(&self, x: &Expr) -> Self {
        Self::binary(BinaryOp::Atan2, self.clone(), x.clone())
    }

    pub fn pow(&self, exponent: &Expr) -> Self {
        Self::binary(BinaryOp::Pow, self.clone(), exponent.clone())
    }

    pub fn powf(&self, exponent: f64) -> Self {
        self.pow(&Expr::constant(exponent))
    }

    pub fn square(&self) -> Self {
        self * self
    }

    /// Free symbols in first-visit order, without duplicates.
    pub fn free_symbols(&self) -> Vec<Symbol> {
        let mut out = Vec::new();
        let mut seen_nodes = std::collections::HashSet::new();
        let mut seen_ids = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(e) = stack.pop() {
            if !seen_nodes.insert(e.ptr()) {
                continue;
            }
            match &*e.0 {
                Node::Const(_) => {}
                Node::Sym(s) => {
                    if seen_ids.insert(s.id) {
                        out.push(s.clone());
                    }
                }
                Node::Unary(_, a) => stack.push(a.clone()),
                Node::Binary(_, a, b) => {
                    stack.push(b.clone());
                    stack.push(a.clone());
                }
                Node::SelectLe(a, b, c, d) => {
                    stack.extend([d.clone(), c.clone(), b.clone(), a.clone()]);
                }
            }
        }
        out
    }

    pub fn depends_on(&self, symbol: &Symbol) -> bool {
        self.free_symbols().iter().any(|s| s == symbol)
    }

    /// Number of distinct nodes in the DAG.
    pub fn node_count(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(e) = stack.pop() {
            if !seen.insert(e.ptr()) {
                continue;
            }
            match &*e.0 {
                Node::Const(_) | Node::Sym(_) => {}
                Node::Unary(_, a) => stack.push(a.clone()),
                Node::Binary(_, a, b) => stack.extend([a.clone(), b.clone()]),
                Node::SelectLe(a, b, c, d) => stack.extend([a.clone(), b.clone(), c.clone(), d.clone()]),
            }
        }
        seen.len()
    }

    /// Recursive (memoised) evaluation; the reference semantics for [`CompiledFn`].
    pub fn eval_with<F>(&self, lookup: &F) -> Result<f64, ExprError>
    where
        F: Fn(&Symbol) -> Option<f64>,
    {
        let mut memo = HashMap::new();
        self.eval_memo(lookup, &mut memo)
    }

    fn eval_memo<F>(&self, lookup: &F, memo: &mut HashMap<*const Node, f64>) -> Result<f64, ExprError>
    where
        F: Fn(&Symbol) -> Option<f64>,
    {
        if let Some(&v) = memo.get(&self.ptr()) {
            return Ok(v);
        }
        let value = match &*self.0 {
            Node::Const(c) => *c,
            Node::Sym(s) => lookup(s).ok_or_else(|| ExprError::MissingSymbol(s.to_string()))?,
            Node::Unary(op, a) => apply_unary(*op, a.eval_memo(lookup, memo)?),
            Node::Binary(op, a, b) => {
                let x = a.eval_memo(lookup, memo)?;
                let y = b.eval_memo(lookup, memo)?;
                apply_binary(*op, x, y)
            }
            Node::SelectLe(a, b, c, d) => {
                if a.eval_memo(lookup, memo)? <= b.eval_memo(lookup, memo)? {
                    c.eval_memo(lookup, memo)?
                } else {
                    d.eval_memo(lookup, memo)?
                }
            }
        };
        memo.insert(self.ptr(), value);
        Ok(value)
    }

    pub fn eval_map(&self, assignment: &HashMap<Symbol, f64>) -> Result<f64, ExprError> {
        self.eval_with(&|s: &Symbol| assignment.get(s).copied())
    }

    /// Symbolic partial derivative with respect to `wrt`.
    pub fn diff(&self, wrt: &Symbol) -> Expr {
        let mut memo = HashMap::new();
        self.diff_memo(wrt.id, &mut memo).unwrap_or_else(Expr::zero)
    }

    /// Forward-mode derivative; `None` is a structural zero.
    fn diff_memo(&self, wrt: u32, memo: &mut HashMap<*const Node, Option<Expr>>) -> Option<Expr> {
        if let Some(d) = memo.get(&self.ptr()) {
            return d.clone();
        }
        let d = match &*self.0 {
            Node::Const(_) => None,
            Node::Sym(s) => (s.id == wrt).then(Expr::one),
            Node::Unary(op, a) => a.diff_memo(wrt, memo).map(|da| match op {
                UnaryOp::Neg => -da,
                UnaryOp::Sin => a.cos() * da,
                UnaryOp::Cos => -(a.sin() * da),
                UnaryOp::Sqrt => {
                    da * (Expr::constant(0.5) / a.max(&Expr::constant(SQRT_DERIVATIVE_FLOOR)).sqrt())
                }
                UnaryOp::Abs => Expr::select_le(Expr::zero(), a.clone(), da.clone(), -da),
                UnaryOp::Acos => {
                    let one_minus = Expr::one() - a.square();
                    -(da / one_minus.max(&Expr::constant(ACOS_DERIVATIVE_FLOOR)).sqrt())
                }
                UnaryOp::Ln => da / a.clone(),
            }),
            Node::Binary(op, a, b) => {
                let da = a.diff_memo(wrt, memo);
                let db = b.diff_memo(wrt, memo);
                if da.is_none() && db.is_none() {
                    None
                } else {
                    let da0 = || da.clone().unwrap_or_else(Expr::zero);
                    let db0 = || db.clone().unwrap_or_else(Expr::zero);
                    Some(match op {
                        BinaryOp::Add => da0() + db0(),
                        BinaryOp::Sub => da0() - db0(),
                        BinaryOp::Mul => da0() * b.clone() + a.clone() * db0(),
                        BinaryOp::Div => da0() / b.clone() - a.clone() * db0() / b.square(),
                        BinaryOp::Min => Expr::select_le(a.clone(), b.clone(), da0(), db0()),
                        BinaryOp::Max => Expr::select_le(b.clone(), a.clone(), da0(), db0()),
                        BinaryOp::Atan2 => {
                            // atan2(y, x): (x dy - y dx) / (x^2 + y^2)
                            (b.clone() * da0() - a.clone() * db0()) / (a.square() + b.square())
                        }
                        BinaryOp::Pow => {
                            let base_term = da
                                .clone()
                                .map(|da| b.clone() * a.pow(&(b.clone() - Expr::one())) * da);
                            let exp_term = db.clone().map(|db| self.clone() * a.ln() * db);
                            match (base_term, exp_term) {
                                (Some(x), Some(y)) => x + y,
                                (Some(x), None) | (None, Some(x)) => x,
                                (None, None) => unreachable!(),
                            }
                        }
                    })
                }
            }
            Node::SelectLe(l, r, c, e) => {
                let dc = c.diff_memo(wrt, memo);
                let de = e.diff_memo(wrt, memo);
                match (dc, de) {
                    (None, None) => None,
                    (dc, de) => Some(Expr::select_le(
                        l.clone(),
                        r.clone(),
                        dc.unwrap_or_else(Expr::zero),
                        de.unwrap_or_else(Expr::zero),
                    )),
                }
            }
        };
        memo.insert(self.ptr(), d.clone());
        d
    }
}

impl From<f64> for Expr {
    fn from(value: f64) -> Self {
        Expr::constant(value)
    }
}

impl From<&Symbol> for Expr {
    fn from(symbol: &Symbol) -> Self {
        Expr::symbol(symbol)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.0 {
            Node::Const(c) => write!(f, "{c}"),
            Node::Sym(s) => write!(f, "{s}"),
            Node::Unary(op, a) => write!(f, "{}({a})", format!("{op:?}").to_lowercase()),
            Node::Binary(BinaryOp::Add, a, b) => write!(f, "({a} + {b})"),
            Node::Binary(BinaryOp::Sub, a, b) => write!(f, "({a} - {b})"),
            Node::Binary(BinaryOp::Mul, a, b) => write!(f, "({a} * {b})"),
            Node::Binary(BinaryOp::Div, a, b) => write!(f, "({a} / {b})"),
            Node::Binary(op, a, b) => write!(f, "{}({a}, {b})", format!("{op:?}").to_lowercase()),
            Node::SelectLe(a, b, c, d) => write!(f, "select({a} <= {b}, {c}, {d})"),
        }
    }
}

macro_rules! impl_binary_operator {
    ($trait:ident, $method:ident, $op:expr) => {
        impl ops::$trait<Expr> for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::binary($op, self, rhs)
            }
        }
        impl ops::$trait<&Expr> for Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                Expr::binary($op, self, rhs.clone())
            }
        }
        impl ops::$trait<Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::binary($op, self.clone(), rhs)
            }
        }
        impl ops::$trait<&Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                Expr::binary($op, self.clone(), rhs.clone())
            }
        }
        impl ops::$trait<f64> for Expr {
            type Output = Expr;
            fn $method(self, rhs: f64) -> Expr {
                Expr::binary($op, self, Expr::constant(rhs))
            }
        }
        impl ops::$trait<f64> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: f64) -> Expr {
                Expr::binary($op, self.clone(), Expr::constant(rhs))
            }
        }
        impl ops::$trait<Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::binary($op, Expr::constant(self), rhs)
            }
        }
        impl ops::$trait<&Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                Expr::binary($op, Expr::constant(self), rhs.clone())
            }
        }
    };
}

impl_binary_operator!(Add, add, BinaryOp::Add);
impl_binary_operator!(Sub, sub, BinaryOp::Sub);
impl_binary_operator!(Mul, mul, BinaryOp::Mul);
impl_binary_operator!(Div, div, BinaryOp::Div);

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::unary(UnaryOp::Neg, self)
    }
}

impl ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::unary(UnaryOp::Neg, self.clone())
    }
}

/// Jacobian of a list of scalar expressions: entry `(i, j)` is `d f_i / d wrt_j`.
pub fn jacobian(f: &[Expr], wrt: &[Symbol]) -> ExprMatrix {
    let mut entries = Vec::with_capacity(f.len() * wrt.len());
    for fi in f {
        for s in wrt {
            entries.push(fi.diff(s));
        }
    }
    ExprMatrix::from_entries(f.len(), wrt.len(), entries)
}

/// Row-major matrix of expressions.
#[derive(Clone, Debug)]
pub struct ExprMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<Expr>,
}

impl ExprMatrix {
    pub fn from_entries(rows: usize, cols: usize, entries: Vec<Expr>) -> Self {
        assert_eq!(entries.len(), rows * cols, "entry count does not match shape");
        Self { rows, cols, entries }
    }

    pub fn from_constants(rows: usize, cols: usize, values: &[f64]) -> Self {
        Self::from_entries(rows, cols, values.iter().map(|&v| Expr::constant(v)).collect())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_entries(rows, cols, vec![Expr::zero(); rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.entries[i * n + i] = Expr::one();
        }
        m
    }

    pub fn column(entries: Vec<Expr>) -> Self {
        let n = entries.len();
        Self::from_entries(n, 1, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> &Expr {
        &self.entries[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, e: Expr) {
        self.entries[r * self.cols + c] = e;
    }

    pub fn entries(&self) -> &[Expr] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<Expr> {
        self.entries
    }

    pub fn transpose(&self) -> Self {
        let mut entries = Vec::with_capacity(self.entries.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                entries.push(self.get(r, c).clone());
            }
        }
        Self::from_entries(self.cols, self.rows, entries)
    }

    pub fn matmul(&self, rhs: &ExprMatrix) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut entries = Vec::with_capacity(self.rows * rhs.cols);
        for r in 0..self.rows {
            for c in 0..rhs.cols {
                let mut acc = Expr::zero();
                for k in 0..self.cols {
                    acc = acc + self.get(r, k) * rhs.get(k, c);
                }
                entries.push(acc);
            }
        }
        Self::from_entries(self.rows, rhs.cols, entries)
    }

    pub fn add(&self, rhs: &ExprMatrix) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let entries = self.entries.iter().zip(&rhs.entries).map(|(a, b)| a + b).collect();
        Self::from_entries(self.rows, self.cols, entries)
    }

    pub fn sub(&self, rhs: &ExprMatrix) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let entries = self.entries.iter().zip(&rhs.entries).map(|(a, b)| a - b).collect();
        Self::from_entries(self.rows, self.cols, entries)
    }

    pub fn scale(&self, s: &Expr) -> Self {
        let entries = self.entries.iter().map(|a| a * s).collect();
        Self::from_entries(self.rows, self.cols, entries)
    }

    /// Dot product of two column vectors.
    pub fn dot(&self, rhs: &ExprMatrix) -> Expr {
        assert_eq!(self.cols, 1);
        assert_eq!(rhs.cols, 1);
        assert_eq!(self.rows, rhs.rows);
        self.entries
            .iter()
            .zip(&rhs.entries)
            .fold(Expr::zero(), |acc, (a, b)| acc + a * b)
    }

    pub fn norm(&self) -> Expr {
        self.dot(self).sqrt()
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            for c in c0..c0 + cols {
                entries.push(self.get(r, c).clone());
            }
        }
        Self::from_entries(rows, cols, entries)
    }

    pub fn eval_with<F>(&self, lookup: &F) -> Result<Vec<f64>, ExprError>
    where
        F: Fn(&Symbol) -> Option<f64>,
    {
        self.entries.iter().map(|e| e.eval_with(lookup)).collect()
    }

    // --- homogeneous transform helpers -------------------------------------------------

    /// 4x4 transform from a constant numeric matrix.
    pub fn from_transform(t: &nalgebra::Matrix4<f64>) -> Self {
        let mut values = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                values[r * 4 + c] = t[(r, c)];
            }
        }
        Self::from_constants(4, 4, &values)
    }

    pub fn translation(x: Expr, y: Expr, z: Expr) -> Self {
        let mut m = Self::identity(4);
        m.set(0, 3, x);
        m.set(1, 3, y);
        m.set(2, 3, z);
        m
    }

    /// Rotation by `angle` about a constant unit `axis` (Rodrigues form).
    pub fn rotation_about(axis: [f64; 3], angle: &Expr) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
        let c = angle.cos();
        let s = angle.sin();
        let v = Expr::one() - &c;
        let mut m = Self::identity(4);
        let rot = [
            [x * x * &v + &c, x * y * &v - z * &s, x * z * &v + y * &s],
            [y * x * &v + z * &s, y * y * &v + &c, y * z * &v - x * &s],
            [z * x * &v - y * &s, z * y * &v + x * &s, z * z * &v + &c],
        ];
        for (r, row) in rot.into_iter().enumerate() {
            for (col, e) in row.into_iter().enumerate() {
                m.set(r, col, e);
            }
        }
        m
    }

    pub fn rotation_z(angle: &Expr) -> Self {
        let c = angle.cos();
        let s = angle.sin();
        let mut m = Self::identity(4);
        m.set(0, 0, c.clone());
        m.set(0, 1, -&s);
        m.set(1, 0, s);
        m.set(1, 1, c);
        m
    }

    /// Inverse of a rigid 4x4 transform: `[R^T, -R^T p; 0, 1]`.
    pub fn inverse_transform(&self) -> Self {
        assert_eq!((self.rows, self.cols), (4, 4));
        let mut m = Self::identity(4);
        for r in 0..3 {
            for c in 0..3 {
                m.set(r, c, self.get(c, r).clone());
            }
        }
        for r in 0..3 {
            let mut acc = Expr::zero();
            for k in 0..3 {
                acc = acc - self.get(k, r) * self.get(k, 3);
            }
            m.set(r, 3, acc);
        }
        m
    }

    pub fn position(&self) -> Self {
        self.block(0, 3, 3, 1)
    }

    pub fn rotation(&self) -> Self {
        self.block(0, 0, 3, 3)
    }

    /// Applies a 4x4 transform to a point given as a 3x1 column.
    pub fn transform_point(&self, p: &ExprMatrix) -> Self {
        self.rotation().matmul(p).add(&self.position())
    }

    /// Applies only the rotation part of a 4x4 transform to a 3x1 vector.
    pub fn transform_vector(&self, v: &ExprMatrix) -> Self {
        self.rotation().matmul(v)
    }
}

#[derive(Clone, Copy, Debug)]
enum Instr {
    Const(f64),
    Unary(UnaryOp, u32),
    Binary(BinaryOp, u32, u32),
    SelectLe(u32, u32, u32, u32),
}

/// Flattened evaluation program over an ordered input list.
///
/// Slots `0..inputs.len()` hold the inputs, every instruction writes the next slot.
#[derive(Clone, Debug)]
pub struct CompiledFn {
    inputs: Vec<Symbol>,
    tape: Vec<Instr>,
    outputs: Vec<u32>,
}

/// Compiles `exprs` into a tape over `inputs` (in that order).
pub fn compile(exprs: &[Expr], inputs: &[Symbol]) -> Result<CompiledFn, ExprError> {
    let mut slot_of: HashMap<*const Node, u32> = HashMap::new();
    let input_slot: HashMap<u32, u32> = inputs
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id, i as u32))
        .collect();
    let mut tape = Vec::new();
    let n_in = inputs.len() as u32;
    let mut outputs = Vec::with_capacity(exprs.len());

    // Iterative post-order traversal so deep FK chains cannot overflow the stack.
    for root in exprs {
        let mut stack: Vec<(Expr, bool)> = vec![(root.clone(), false)];
        while let Some((e, expanded)) = stack.pop() {
            if slot_of.contains_key(&e.ptr()) {
                continue;
            }
            if let Node::Sym(s) = &*e.0 {
                let slot = *input_slot
                    .get(&s.id)
                    .ok_or_else(|| ExprError::FreeSymbol(s.to_string()))?;
                slot_of.insert(e.ptr(), slot);
                continue;
            }
            if !expanded {
                stack.push((e.clone(), true));
                match &*e.0 {
                    Node::Const(_) | Node::Sym(_) => {}
                    Node::Unary(_, a) => stack.push((a.clone(), false)),
                    Node::Binary(_, a, b) => {
                        stack.push((b.clone(), false));
                        stack.push((a.clone(), false));
                    }
                    Node::SelectLe(a, b, c, d) => {
                        for x in [d, c, b, a] {
                            stack.push((x.clone(), false));
                        }
                    }
                }
                continue;
            }
            let slot_ref = |x: &Expr| slot_of[&x.ptr()];
            let instr = match &*e.0 {
                Node::Const(c) => Instr::Const(*c),
                Node::Sym(_) => unreachable!(),
                Node::Unary(op, a) => Instr::Unary(*op, slot_ref(a)),
                Node::Binary(op, a, b) => Instr::Binary(*op, slot_ref(a), slot_ref(b)),
                Node::SelectLe(a, b, c, d) => {
                    Instr::SelectLe(slot_ref(a), slot_ref(b), slot_ref(c), slot_ref(d))
                }
            };
            let slot = n_in + tape.len() as u32;
            tape.push(instr);
            slot_of.insert(e.ptr(), slot);
        }
        outputs.push(slot_of[&root.ptr()]);
    }
    Ok(CompiledFn {
        inputs: inputs.to_vec(),
        tape,
        outputs,
    })
}

impl CompiledFn {
    pub fn inputs(&self) -> &[Symbol] {
        &self.inputs
    }

    pub fn output_len(&self) -> usize {
        self.outputs.len()
    }

    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }

    /// Evaluates with input values in `inputs()` order. `scratch` is reused between calls.
    pub fn eval_into(&self, input_values: &[f64], scratch: &mut Vec<f64>, out: &mut [f64]) {
        assert_eq!(input_values.len(), self.inputs.len(), "input length mismatch");
        assert_eq!(out.len(), self.outputs.len(), "output length mismatch");
        scratch.clear();
        scratch.extend_from_slice(input_values);
        for instr in &self.tape {
            let v = match *instr {
                Instr::Const(c) => c,
                Instr::Unary(op, a) => apply_unary(op, scratch[a as usize]),
                Instr::Binary(op, a, b) => apply_binary(op, scratch[a as usize], scratch[b as usize]),
                Instr::SelectLe(a, b, c, d) => {
                    if scratch[a as usize] <= scratch[b as usize] {
                        scratch[c as usize]
                    } else {
                        scratch[d as usize]
                    }
                }
            };
            scratch.push(v);
        }
        for (o, &slot) in out.iter_mut().zip(&self.outputs) {
            *o = scratch[slot as usize];
        }
    }

    pub fn eval_slice(&self, input_values: &[f64]) -> Vec<f64> {
        let mut scratch = Vec::with_capacity(self.inputs.len() + self.tape.len());
        let mut out = vec![0.0; self.outputs.len()];
        self.eval_into(input_values, &mut scratch, &mut out);
        out
    }

    pub fn eval(&self, assignment: &HashMap<Symbol, f64>) -> Result<Vec<f64>, ExprError> {
        let values = self
            .inputs
            .iter()
            .map(|s| {
                assignment
                    .get(s)
                    .copied()
                    .ok_or_else(|| ExprError::MissingSymbol(s.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.eval_slice(&values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn two_symbols() -> (SymbolRegistry, Expr, Expr) {
        let mut reg = SymbolRegistry::new();
        let x = reg.make_symbol("x", SymbolKind::Virtual).unwrap();
        let y = reg.make_symbol("y", SymbolKind::Virtual).unwrap();
        (reg, x, y)
    }

    #[test]
    fn registry_rejects_duplicates_and_registers_siblings() {
        let mut reg = SymbolRegistry::new();
        let hinge = reg.make_symbol("hinge", SymbolKind::DofPosition).unwrap();
        assert_eq!(hinge.as_symbol().unwrap().kind(), SymbolKind::DofPosition);
        assert!(matches!(
            reg.make_symbol("hinge", SymbolKind::DofPosition),
            Err(ExprError::DuplicateSymbol { .. })
        ));
        for kind in [SymbolKind::DofVelocity, SymbolKind::DofAcceleration, SymbolKind::DofJerk] {
            assert!(reg.get("hinge", kind).is_some());
        }
        let odom = reg.make_symbol("odom_x_meas", SymbolKind::Virtual).unwrap();
        assert!(!odom.as_symbol().unwrap().is_controllable());
        assert!(reg.make_symbol("v", SymbolKind::DofVelocity).is_err());
    }

    #[test]
    fn basic_derivatives() {
        let (_reg, x, y) = two_symbols();
        let sx = x.as_symbol().unwrap().clone();
        let sy = y.as_symbol().unwrap().clone();
        let at = |xv: f64, yv: f64| {
            move |s: &Symbol| if s.name() == "x" { Some(xv) } else { Some(yv) }
        };
        assert_eq!(x.sin().diff(&sx).eval_with(&at(0.0, 0.0)).unwrap(), 1.0);
        assert_eq!(Expr::constant(4.0).diff(&sx).as_constant(), Some(0.0));
        let f = &x * &y + y.square();
        let j = jacobian(&[f], &[sx, sy]);
        let vals = j.eval_with(&at(2.0, 3.0)).unwrap();
        assert_eq!(vals, vec![3.0, 8.0]);
    }

    #[test]
    fn compile_and_eval() {
        let (_reg, x, y) = two_symbols();
        let sx = x.as_symbol().unwrap().clone();
        let sy = y.as_symbol().unwrap().clone();
        let f = compile(&[&x + 1.0], &[sx.clone()]).unwrap();
        assert_eq!(f.eval_slice(&[2.0]), vec![3.0]);
        match compile(&[x.clone()], &[]) {
            Err(ExprError::FreeSymbol(name)) => assert_eq!(name, "x"),
            other => panic!("unexpected {other:?}"),
        }
        let g = compile(&[&x * &y, y.atan2(&x)], &[sx.clone(), sy.clone()]).unwrap();
        let mut a = HashMap::new();
        a.insert(sx.clone(), 2.0);
        a.insert(sy.clone(), 5.0);
        assert_eq!(g.eval(&a).unwrap()[0], 10.0);
        a.insert(sx.clone(), 1.0);
        a.insert(sy.clone(), 0.0);
        assert_eq!(g.eval(&a).unwrap()[1], 0.0);
        a.remove(&sy);
        assert!(matches!(g.eval(&a), Err(ExprError::MissingSymbol(_))));
    }

    #[test]
    fn acos_clamps_its_input() {
        let (_reg, x, _y) = two_symbols();
        let sx = x.as_symbol().unwrap().clone();
        let f = compile(&[x.acos()], &[sx]).unwrap();
        let oracle = 1.0000000001f64.clamp(-1.0, 1.0).acos();
        assert_eq!(f.eval_slice(&[1.0000000001]), vec![oracle]);
        assert_eq!(oracle, 0.0);
    }

    #[test]
    fn min_max_ties_take_left_branch() {
        let (_reg, x, y) = two_symbols();
        let sx = x.as_symbol().unwrap().clone();
        let at = |s: &Symbol| if s.name() == "x" { Some(1.0) } else { Some(1.0) };
        assert_eq!(x.min(&y).diff(&sx).eval_with(&at).unwrap(), 1.0);
        assert_eq!(x.max(&y).diff(&sx).eval_with(&at).unwrap(), 1.0);
        assert_eq!(y.min(&x).diff(&sx).eval_with(&at).unwrap(), 0.0);
    }

    #[test]
    fn sqrt_derivative_is_finite_at_zero() {
        let (_reg, x, y) = two_symbols();
        let sx = x.as_symbol().unwrap().clone();
        let d = (x.square() + y.square()).sqrt().diff(&sx);
        let v = d.eval_with(&|_: &Symbol| Some(0.0)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn rotation_about_z_matches_analytic() {
        let m = ExprMatrix::rotation_about([0.0, 0.0, 1.0], &Expr::constant(PI / 2.0));
        let v = m.eval_with(&|_: &Symbol| None).unwrap();
        let expected = [0.0, -1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_folding_only_collapses_literals() {
        let (_reg, x, _y) = two_symbols();
        let folded = Expr::constant(2.0) * Expr::constant(3.0) + 1.0;
        assert_eq!(folded.as_constant(), Some(7.0));
        assert!((&x + 1.0).as_constant().is_none());
    }
}
