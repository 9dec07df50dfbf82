//! Scalar expressions in the chart variables `x1..xn`, `y1..yn`.
//!
//! An [`Expr`] is an immutable tree. Children are reference counted so that
//! substitution and differentiation can share subtrees freely; the tree is
//! `Send + Sync` and every operation on it is pure.
//!
//! The grammar is intentionally small: numeric literals, chart variables,
//! named parameters, `+ - * /`, powers with a constant exponent, unary minus
//! and `sqrt`. The parser folds constant subtrees and does nothing else.

mod calculus;
mod file;
mod parse;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use twofloat::TwoFloat;

use crate::error::{Error, Result};

pub use calculus::{change_coordinates, differentiate, substitute, CoordinateChange};
pub use file::{MetricDefinition, MetricSource};
pub use parse::{parse_metric, parse_with, ParseOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKind {
    /// A base coordinate `x_i`.
    Position,
    /// A fiber coordinate `y_i`.
    Fiber,
}

/// A chart variable; `index` is 1-based as in `x1`, `y3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var {
    pub kind: VarKind,
    pub index: usize,
}

impl Var {
    pub const fn x(index: usize) -> Self {
        Var {
            kind: VarKind::Position,
            index,
        }
    }

    pub const fn y(index: usize) -> Self {
        Var {
            kind: VarKind::Fiber,
            index,
        }
    }

    pub fn is_fiber(&self) -> bool {
        self.kind == VarKind::Fiber
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            VarKind::Position => write!(f, "x{}", self.index),
            VarKind::Fiber => write!(f, "y{}", self.index),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Param(Arc<str>),
    Neg(Arc<Expr>),
    Add(Arc<Expr>, Arc<Expr>),
    Sub(Arc<Expr>, Arc<Expr>),
    Mul(Arc<Expr>, Arc<Expr>),
    Div(Arc<Expr>, Arc<Expr>),
    /// Power with a constant exponent.
    Pow(Arc<Expr>, f64),
    Sqrt(Arc<Expr>),
}

impl Expr {
    pub fn num(v: f64) -> Self {
        Expr::Num(v)
    }

    pub fn var(v: Var) -> Self {
        Expr::Var(v)
    }

    pub fn x(i: usize) -> Self {
        Expr::Var(Var::x(i))
    }

    pub fn y(i: usize) -> Self {
        Expr::Var(Var::y(i))
    }

    pub fn param(name: &str) -> Self {
        Expr::Param(Arc::from(name))
    }

    pub fn powf(self, p: f64) -> Self {
        Expr::Pow(Arc::new(self), p)
    }

    pub fn sqrt(self) -> Self {
        Expr::Sqrt(Arc::new(self))
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            Expr::Num(v) => Some(*v),
            _ => None,
        }
    }

    /// Number of nodes in the tree.
    pub fn size(&self) -> usize {
        match self {
            Expr::Num(_) | Expr::Var(_) | Expr::Param(_) => 1,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Sqrt(a) => 1 + a.size(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => 1 + a.size() + b.size(),
        }
    }

    pub fn variables(&self) -> BTreeSet<Var> {
        let mut out = BTreeSet::new();
        self.visit(&mut |e| {
            if let Expr::Var(v) = e {
                out.insert(*v);
            }
        });
        out
    }

    pub fn parameters(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.visit(&mut |e| {
            if let Expr::Param(p) = e {
                out.insert(p.to_string());
            }
        });
        out
    }

    /// Largest variable index referenced (0 for a constant expression).
    pub fn max_index(&self) -> usize {
        self.variables().iter().map(|v| v.index).max().unwrap_or(0)
    }

    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Num(_) | Expr::Var(_) | Expr::Param(_) => {}
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Sqrt(a) => a.visit(f),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.visit(f);
                b.visit(f);
            }
        }
    }

    /// Replaces every bound parameter by its value. Unbound parameters are left
    /// in place and surface as [`Error::UnboundParameter`] on evaluation.
    pub fn bind_params(&self, params: &BTreeMap<String, f64>) -> Expr {
        match self {
            Expr::Param(p) => match params.get(p.as_ref()) {
                Some(v) => Expr::Num(*v),
                None => self.clone(),
            },
            Expr::Num(_) | Expr::Var(_) => self.clone(),
            Expr::Neg(a) => Expr::Neg(Arc::new(a.bind_params(params))),
            Expr::Pow(a, p) => Expr::Pow(Arc::new(a.bind_params(params)), *p),
            Expr::Sqrt(a) => Expr::Sqrt(Arc::new(a.bind_params(params))),
            Expr::Add(a, b) => Expr::Add(Arc::new(a.bind_params(params)), Arc::new(b.bind_params(params))),
            Expr::Sub(a, b) => Expr::Sub(Arc::new(a.bind_params(params)), Arc::new(b.bind_params(params))),
            Expr::Mul(a, b) => Expr::Mul(Arc::new(a.bind_params(params)), Arc::new(b.bind_params(params))),
            Expr::Div(a, b) => Expr::Div(Arc::new(a.bind_params(params)), Arc::new(b.bind_params(params))),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident) => {
        impl std::ops::$trait for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::$variant(Arc::new(self), Arc::new(rhs))
            }
        }
    };
}

binary_op!(Add, add, Add);
binary_op!(Sub, sub, Sub);
binary_op!(Mul, mul, Mul);
binary_op!(Div, div, Div);

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::Neg(Arc::new(self))
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    if e.precedence() < min_prec {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

fn write_number(f: &mut fmt::Formatter<'_>, v: f64) -> fmt::Result {
    if v < 0.0 || (v == 0.0 && v.is_sign_negative()) {
        write!(f, "-{}", -v)
    } else {
        write!(f, "{v}")
    }
}

/// Prints with the minimal parentheses that make `parse(print(e)) == e`
/// for every tree the parser can produce.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write_number(f, *v),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Param(p) => write!(f, "{p}"),
            Expr::Neg(a) => {
                write!(f, "-")?;
                write_child(f, a, 3)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                write_child(f, a, 1)?;
                write!(f, "{}", if matches!(self, Expr::Add(..)) { " + " } else { " - " })?;
                write_child(f, b, 2)
            }
            Expr::Mul(a, b) | Expr::Div(a, b) => {
                write_child(f, a, 2)?;
                write!(f, "{}", if matches!(self, Expr::Mul(..)) { "*" } else { "/" })?;
                write_child(f, b, 3)
            }
            Expr::Pow(a, p) => {
                write_child(f, a, 5)?;
                if *p < 0.0 {
                    write!(f, "^(")?;
                    write_number(f, *p)?;
                    write!(f, ")")
                } else {
                    write!(f, "^{p}")
                }
            }
            Expr::Sqrt(a) => write!(f, "sqrt({a})"),
        }
    }
}

/// Values for the chart variables and named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub dimension: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub params: BTreeMap<String, f64>,
}

impl Environment {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: y.len(),
            });
        }
        Ok(Environment {
            dimension: x.len(),
            x,
            y,
            params: BTreeMap::new(),
        })
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn with_params(mut self, params: &BTreeMap<String, f64>) -> Self {
        self.params.extend(params.iter().map(|(k, v)| (k.clone(), *v)));
        self
    }

    pub fn value_of(&self, v: Var) -> Result<f64> {
        let slot = match v.kind {
            VarKind::Position => &self.x,
            VarKind::Fiber => &self.y,
        };
        if v.index == 0 || v.index > slot.len() {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                found: v.index,
            });
        }
        Ok(slot[v.index - 1])
    }
}

/// Arithmetic needed to lift an expression tree into some number type.
///
/// The evaluator performs all domain checks on `value()` before calling the
/// partial operations (`recip`, `powf`, `sqrt`), so implementations may assume
/// their preconditions.
pub(crate) trait Scalar: Clone {
    fn value(&self) -> f64;
    /// Highest derivative order carried (0 for plain reals).
    fn order(&self) -> usize;
    fn add(&self, rhs: &Self) -> Self;
    fn sub(&self, rhs: &Self) -> Self;
    fn mul(&self, rhs: &Self) -> Self;
    fn neg(&self) -> Self;
    /// Requires `value() != 0`.
    fn recip(&self) -> Self;
    /// Non-negative integer power.
    fn powi(&self, n: u32) -> Self;
    /// Requires `value() > 0`, or `value() == 0` with `order() < p`.
    fn powf(&self, p: f64) -> Self;
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn order(&self) -> usize {
        0
    }
    fn add(&self, rhs: &Self) -> Self {
        self + rhs
    }
    fn sub(&self, rhs: &Self) -> Self {
        self - rhs
    }
    fn mul(&self, rhs: &Self) -> Self {
        self * rhs
    }
    fn neg(&self) -> Self {
        -self
    }
    fn recip(&self) -> Self {
        1.0 / self
    }
    fn powi(&self, n: u32) -> Self {
        f64::powi(*self, n as i32)
    }
    fn powf(&self, p: f64) -> Self {
        if p == 0.5 {
            self.sqrt()
        } else {
            f64::powf(*self, p)
        }
    }
}

impl Scalar for TwoFloat {
    fn value(&self) -> f64 {
        self.hi() + self.lo()
    }
    fn order(&self) -> usize {
        0
    }
    fn add(&self, rhs: &Self) -> Self {
        *self + *rhs
    }
    fn sub(&self, rhs: &Self) -> Self {
        *self - *rhs
    }
    fn mul(&self, rhs: &Self) -> Self {
        *self * *rhs
    }
    fn neg(&self) -> Self {
        -*self
    }
    fn recip(&self) -> Self {
        dd_recip(*self)
    }
    fn powi(&self, n: u32) -> Self {
        if n == 0 {
            TwoFloat::from(1.0)
        } else {
            TwoFloat::powi(*self, n as i32)
        }
    }
    fn powf(&self, p: f64) -> Self {
        match small_rational(p) {
            Some((num, den)) => {
                let root = nth_root(*self, den);
                if num >= 0 {
                    Scalar::powi(&root, num as u32)
                } else {
                    Scalar::powi(&root, (-num) as u32).recip()
                }
            }
            None => TwoFloat::powf(*self, TwoFloat::from(p)),
        }
    }
}

/// One Newton step from the f64 reciprocal; the crate's own division loses
/// the low word.
fn dd_recip(v: TwoFloat) -> TwoFloat {
    let r = TwoFloat::from(1.0 / v.hi());
    r + r * (TwoFloat::from(1.0) - v * r)
}

/// `p = num/den` exactly with `den <= 64`.
fn small_rational(p: f64) -> Option<(i64, u32)> {
    (1..=64u32).find_map(|den| {
        let num = p * den as f64;
        (num.fract() == 0.0 && num.abs() < 1e9).then_some((num as i64, den))
    })
}

/// Positive `den`-th root by Newton refinement of the f64 root.
fn nth_root(v: TwoFloat, den: u32) -> TwoFloat {
    match den {
        1 => v,
        2 => v.sqrt(),
        _ if v.hi() == 0.0 => v,
        _ => {
            let n = den as i32;
            let mut z = TwoFloat::from(v.hi().powf(1.0 / den as f64));
            for _ in 0..2 {
                z = z - (z.powi(n) - v) * dd_recip(z.powi(n - 1) * den as f64);
            }
            z
        }
    }
}

fn integer_exponent(p: f64) -> Option<i64> {
    (p.fract() == 0.0 && p.abs() < 1e9).then_some(p as i64)
}

/// Evaluates `e` in any [`Scalar`] type. `leaf` supplies chart variables and
/// `konst` embeds real constants.
pub(crate) fn eval_generic<T: Scalar>(
    e: &Expr,
    leaf: &impl Fn(Var) -> Result<T>,
    konst: &impl Fn(f64) -> T,
) -> Result<T> {
    match e {
        Expr::Num(v) => Ok(konst(*v)),
        Expr::Var(v) => leaf(*v),
        Expr::Param(p) => Err(Error::UnboundParameter(p.to_string())),
        Expr::Neg(a) => Ok(eval_generic(a, leaf, konst)?.neg()),
        Expr::Add(a, b) => Ok(eval_generic(a, leaf, konst)?.add(&eval_generic(b, leaf, konst)?)),
        Expr::Sub(a, b) => Ok(eval_generic(a, leaf, konst)?.sub(&eval_generic(b, leaf, konst)?)),
        Expr::Mul(a, b) => Ok(eval_generic(a, leaf, konst)?.mul(&eval_generic(b, leaf, konst)?)),
        Expr::Div(a, b) => {
            let num = eval_generic(a, leaf, konst)?;
            let den = eval_generic(b, leaf, konst)?;
            if den.value() == 0.0 || !den.value().is_finite() {
                return Err(Error::domain(e, "division by zero"));
            }
            Ok(num.mul(&den.recip()))
        }
        Expr::Pow(a, p) => {
            let base = eval_generic(a, leaf, konst)?;
            pow_checked(e, &base, *p)
        }
        Expr::Sqrt(a) => {
            let arg = eval_generic(a, leaf, konst)?;
            let v = arg.value();
            if v < 0.0 {
                return Err(Error::domain(e, format!("sqrt of negative value {v:e}")));
            }
            if v == 0.0 && arg.order() > 0 {
                return Err(Error::domain(e, "sqrt is not differentiable at zero"));
            }
            Ok(arg.powf(0.5))
        }
    }
}

fn pow_checked<T: Scalar>(e: &Expr, base: &T, p: f64) -> Result<T> {
    let v = base.value();
    if let Some(n) = integer_exponent(p) {
        if n >= 0 {
            return Ok(base.powi(n as u32));
        }
        if v == 0.0 {
            return Err(Error::domain(e, "negative power of zero (division by zero)"));
        }
        return Ok(base.powi((-n) as u32).recip());
    }
    if v < 0.0 {
        return Err(Error::domain(e, format!("fractional power of negative value {v:e}")));
    }
    if v == 0.0 && (p < 0.0 || base.order() as f64 > p) {
        return Err(Error::domain(e, "fractional power is not differentiable at zero"));
    }
    Ok(base.powf(p))
}

/// Real value of `e` at `env`.
pub fn evaluate(e: &Expr, env: &Environment) -> Result<f64> {
    let bound;
    let e = if env.params.is_empty() {
        e
    } else {
        bound = e.bind_params(&env.params);
        &bound
    };
    eval_generic(e, &|v| env.value_of(v), &|c| c)
}

/// Plain evaluation at raw coordinate slices; `e` must be parameter free.
pub(crate) fn evaluate_at(e: &Expr, x: &[f64], y: &[f64]) -> Result<f64> {
    eval_generic(
        e,
        &|v: Var| {
            let slot = if v.is_fiber() { y } else { x };
            slot.get(v.index.wrapping_sub(1))
                .copied()
                .ok_or(Error::DimensionMismatch {
                    expected: slot.len(),
                    found: v.index,
                })
        },
        &|c| c,
    )
}
