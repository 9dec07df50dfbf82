//! Exact mixed partial derivatives by lifting expressions into truncated
//! polynomials over nilpotent tags.
//!
//! A [`Jet`] with `k` tags `e_1..e_k` (each `e_t^2 = 0`, distinct tags
//! commute) stores one coefficient per subset of the tag set. Seeding tag `t`
//! on variable `v` and evaluating an expression `f` gives, at subset `S`, the
//! mixed partial of `f` with respect to the variables seeded by `S`. A
//! repeated variable simply gets several tags.

use twofloat::TwoFloat;

use crate::error::{Error, Result};
use crate::expr::{eval_generic, Expr, Scalar, Var, VarKind};
use crate::geometry::ChartPoint;

pub const MAX_TAGS: usize = 6;
const WIDTH: usize = 1 << MAX_TAGS;

pub const MAX_FIBER_ORDER: usize = 5;
pub const MAX_POSITION_ORDER: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    tags: u8,
    c: [f64; WIDTH],
}

impl Jet {
    pub fn constant(tags: usize, value: f64) -> Self {
        assert!(tags <= MAX_TAGS, "at most {MAX_TAGS} tags");
        let mut c = [0.0; WIDTH];
        c[0] = value;
        Jet { tags: tags as u8, c }
    }

    /// A variable with value `value` whose first-order coefficient is 1 for
    /// every tag in `mask`.
    pub fn seeded(tags: usize, value: f64, mask: usize) -> Self {
        let mut j = Jet::constant(tags, value);
        for t in 0..tags {
            if mask & (1 << t) != 0 {
                j.c[1 << t] = 1.0;
            }
        }
        j
    }

    pub fn from_coeffs(tags: usize, coeffs: &[f64]) -> Self {
        let mut j = Jet::constant(tags, 0.0);
        j.c[..1 << tags].copy_from_slice(&coeffs[..1 << tags]);
        j
    }

    pub fn tags(&self) -> usize {
        self.tags as usize
    }

    fn len(&self) -> usize {
        1 << self.tags
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    /// Coefficient of the tag subset `mask`.
    pub fn coeff(&self, mask: usize) -> f64 {
        self.c[mask]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.c[..self.len()]
    }

    /// Coefficient of the full tag set, i.e. the highest mixed partial.
    pub fn top(&self) -> f64 {
        self.c[self.len() - 1]
    }

    fn is_constant(&self) -> bool {
        self.c[1..self.len()].iter().all(|v| *v == 0.0)
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = *self;
        out.c[..self.len()].iter_mut().for_each(|v| *v *= s);
        out
    }

    fn zip(&self, rhs: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.tags, rhs.tags);
        let mut out = *self;
        for s in 0..self.len() {
            out.c[s] = f(self.c[s], rhs.c[s]);
        }
        out
    }

    /// Subset-convolution product: `(ab)[S] = sum over T subset S of a[T] b[S \ T]`.
    pub fn product(&self, rhs: &Self) -> Self {
        debug_assert_eq!(self.tags, rhs.tags);
        let mut out = Jet::constant(self.tags(), 0.0);
        for s in 0..self.len() {
            let mut acc = 0.0;
            let mut t = s;
            loop {
                acc += self.c[t] * rhs.c[s ^ t];
                if t == 0 {
                    break;
                }
                t = (t - 1) & s;
            }
            out.c[s] = acc;
        }
        out
    }

    /// `sum_m coeffs[m] * eps^m` where `eps` is the nilpotent part of `self`.
    /// Terms beyond the tag count vanish identically.
    fn series(&self, coeffs: &[f64]) -> Self {
        let mut eps = *self;
        eps.c[0] = 0.0;
        let k = coeffs.len().min(self.tags() + 1);
        let mut acc = Jet::constant(self.tags(), coeffs[k - 1]);
        for m in (0..k - 1).rev() {
            acc = acc.product(&eps);
            acc.c[0] += coeffs[m];
        }
        acc
    }

    pub fn reciprocal(&self) -> Self {
        let a0 = self.value();
        let mut coeffs = Vec::with_capacity(self.tags() + 1);
        let mut term = 1.0 / a0;
        for _ in 0..=self.tags() {
            coeffs.push(term);
            term *= -1.0 / a0;
        }
        self.series(&coeffs)
    }

    /// Real power via the binomial series; needs `value() > 0` unless the
    /// nilpotent part vanishes.
    pub fn power(&self, p: f64) -> Self {
        let a0 = self.value();
        if self.is_constant() {
            return Jet::constant(self.tags(), a0.powf(p));
        }
        let mut coeffs = Vec::with_capacity(self.tags() + 1);
        let mut binom = 1.0;
        for m in 0..=self.tags() {
            coeffs.push(binom * a0.powf(p - m as f64));
            binom *= (p - m as f64) / (m as f64 + 1.0);
        }
        self.series(&coeffs)
    }

    pub fn integer_power(&self, n: u32) -> Self {
        let mut result = Jet::constant(self.tags(), 1.0);
        let mut base = *self;
        let mut n = n;
        while n > 0 {
            if n & 1 == 1 {
                result = result.product(&base);
            }
            n >>= 1;
            if n > 0 {
                base = base.product(&base);
            }
        }
        result
    }
}

impl std::ops::Add for Jet {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        self.zip(&rhs, |a, b| a + b)
    }
}

impl std::ops::Sub for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        self.zip(&rhs, |a, b| a - b)
    }
}

impl std::ops::Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        self.product(&rhs)
    }
}

impl std::ops::Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Scalar for Jet {
    fn value(&self) -> f64 {
        self.c[0]
    }
    fn order(&self) -> usize {
        if self.is_constant() {
            0
        } else {
            self.tags()
        }
    }
    fn add(&self, rhs: &Self) -> Self {
        *self + *rhs
    }
    fn sub(&self, rhs: &Self) -> Self {
        *self - *rhs
    }
    fn mul(&self, rhs: &Self) -> Self {
        self.product(rhs)
    }
    fn neg(&self) -> Self {
        -*self
    }
    fn recip(&self) -> Self {
        self.reciprocal()
    }
    fn powi(&self, n: u32) -> Self {
        self.integer_power(n)
    }
    fn powf(&self, p: f64) -> Self {
        self.power(p)
    }
}

/// Evaluates `e` with tag `t` seeded on `seeds[t]`. `e` must be parameter free.
pub fn lift(e: &Expr, x: &[f64], y: &[f64], seeds: &[Var]) -> Result<Jet> {
    let k = seeds.len();
    if k > MAX_TAGS {
        return Err(Error::OrderBounds(format!(
            "{k} tags requested, at most {MAX_TAGS} supported"
        )));
    }
    eval_generic(
        e,
        &|v: Var| {
            let slot = if v.is_fiber() { y } else { x };
            let value = *slot.get(v.index.wrapping_sub(1)).ok_or(Error::DimensionMismatch {
                expected: slot.len(),
                found: v.index,
            })?;
            let mask = seeds
                .iter()
                .enumerate()
                .filter(|(_, s)| **s == v)
                .fold(0usize, |m, (t, _)| m | (1 << t));
            Ok(Jet::seeded(k, value, mask))
        },
        &|c| Jet::constant(k, c),
    )
}

/// A mixed partial derivative to take at a chart point.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeRequest {
    pub point: ChartPoint,
    pub vars: Vec<Var>,
}

impl DerivativeRequest {
    pub fn new(point: ChartPoint, vars: Vec<Var>) -> Result<Self> {
        let n = point.dimension();
        let fiber = vars.iter().filter(|v| v.is_fiber()).count();
        let position = vars.len() - fiber;
        if fiber > MAX_FIBER_ORDER {
            return Err(Error::OrderBounds(format!(
                "{fiber} fiber derivatives requested, at most {MAX_FIBER_ORDER}"
            )));
        }
        if position > MAX_POSITION_ORDER {
            return Err(Error::OrderBounds(format!(
                "{position} position derivatives requested, at most {MAX_POSITION_ORDER}"
            )));
        }
        if let Some(v) = vars.iter().find(|v| v.index == 0 || v.index > n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: v.index,
            });
        }
        Ok(DerivativeRequest { point, vars })
    }

    pub fn order(&self) -> usize {
        self.vars.len()
    }

    /// Sorted copy of the variable multiset.
    pub fn canonical_vars(&self) -> Vec<Var> {
        let mut v = self.vars.clone();
        v.sort();
        v
    }
}

/// Exact mixed partial. The variable multiset is canonicalized first, so any
/// ordering of the same request gives bit-identical results.
pub fn mixed_partial(e: &Expr, req: &DerivativeRequest) -> Result<f64> {
    let vars = req.canonical_vars();
    let jet = lift(e, &req.point.x, &req.point.y, &vars)?;
    Ok(jet.top())
}

fn gradient(e: &Expr, p: &ChartPoint, kind: VarKind) -> Result<Vec<f64>> {
    (1..=p.dimension())
        .map(|i| {
            let v = Var { kind, index: i };
            Ok(lift(e, &p.x, &p.y, &[v])?.top())
        })
        .collect()
}

pub fn gradient_y(e: &Expr, p: &ChartPoint) -> Result<Vec<f64>> {
    gradient(e, p, VarKind::Fiber)
}

pub fn gradient_x(e: &Expr, p: &ChartPoint) -> Result<Vec<f64>> {
    gradient(e, p, VarKind::Position)
}

/// Nested central differences with one Richardson level, step `step` in every
/// direction. Truncation error is O(step^4) per direction.
pub fn fd_partial(e: &Expr, req: &DerivativeRequest, step: f64) -> Result<f64> {
    let steps = vec![step; req.vars.len()];
    fd_partial_with_steps(e, req, &steps)
}

/// As [`fd_partial`] with one step per requested variable.
pub fn fd_partial_with_steps(e: &Expr, req: &DerivativeRequest, steps: &[f64]) -> Result<f64> {
    assert_eq!(steps.len(), req.vars.len());
    if steps.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::OrderBounds("finite-difference step must be positive".into()));
    }
    let coarse = central_difference(e, req, steps, 1.0)?;
    let fine = central_difference(e, req, steps, 0.5)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Evaluated in double-double so that cancellation at fifth order stays far
/// below the truncation error.
fn central_difference(e: &Expr, req: &DerivativeRequest, steps: &[f64], factor: f64) -> Result<f64> {
    let m = req.vars.len();
    let base = |v: Var| {
        let slot = if v.is_fiber() { &req.point.y } else { &req.point.x };
        TwoFloat::from(slot[v.index - 1])
    };
    let mut acc = TwoFloat::from(0.0);
    for signs in 0..(1usize << m) {
        let mut shift: Vec<(Var, TwoFloat)> = Vec::with_capacity(m);
        let mut weight = 1.0;
        for (t, v) in req.vars.iter().enumerate() {
            let sign = if signs & (1 << t) != 0 { -1.0 } else { 1.0 };
            weight *= sign;
            let h = TwoFloat::from(steps[t]) * factor * sign;
            match shift.iter_mut().find(|(w, _)| w == v) {
                Some((_, d)) => *d += h,
                None => shift.push((*v, h)),
            }
        }
        let value = eval_generic(
            e,
            &|v: Var| {
                if v.index == 0 || v.index > req.point.dimension() {
                    return Err(Error::DimensionMismatch {
                        expected: req.point.dimension(),
                        found: v.index,
                    });
                }
                let d = shift
                    .iter()
                    .find(|(w, _)| *w == v)
                    .map_or(TwoFloat::from(0.0), |(_, d)| *d);
                Ok(base(v) + d)
            },
            &TwoFloat::from,
        )?;
        acc += value * weight;
    }
    let denom: f64 = steps.iter().map(|h| 2.0 * h * factor).product();
    Ok((acc / denom).hi())
}

/// Default per-direction steps for [`fd_partial_with_steps`]: a fixed fraction
/// of the local length scale, `|y|` for fiber directions and
/// `max(1, |x_i|)` for position directions.
pub fn default_fd_steps(req: &DerivativeRequest) -> Vec<f64> {
    let ynorm = req.point.y.iter().map(|v| v * v).sum::<f64>().sqrt();
    req.vars
        .iter()
        .map(|v| {
            if v.is_fiber() {
                FD_FIBER_FRACTION * ynorm
            } else {
                FD_POSITION_FRACTION * req.point.x[v.index - 1].abs().max(1.0)
            }
        })
        .collect()
}

pub const FD_FIBER_FRACTION: f64 = 1e-3;
pub const FD_POSITION_FRACTION: f64 = 1e-3;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{evaluate_at, parse_metric};
    use proptest::prelude::*;

    fn point(x: &[f64], y: &[f64]) -> ChartPoint {
        ChartPoint::new(x.to_vec(), y.to_vec()).unwrap()
    }

    fn req(p: &ChartPoint, vars: &[Var]) -> DerivativeRequest {
        DerivativeRequest::new(p.clone(), vars.to_vec()).unwrap()
    }

    #[test]
    fn product_matches_hand_expansion() {
        // (2 + e1 + 3e2)(5 - e1 + e2) with e1^2 = e2^2 = 0
        let a = Jet::from_coeffs(2, &[2.0, 1.0, 3.0, 0.0]);
        let b = Jet::from_coeffs(2, &[5.0, -1.0, 1.0, 0.0]);
        let p = a * b;
        // 10 + (5-2)e1 + (2+15)e2 + (1*1 + 3*(-1))e1e2
        assert_eq!(p.coeffs(), &[10.0, 3.0, 17.0, -2.0]);
    }

    #[test]
    fn repeated_tag_on_one_variable_gives_second_derivative() {
        // (y + e1 + e2)^2 = y^2 + 2y e1 + 2y e2 + 2 e1e2
        let y = Jet::seeded(2, 3.0, 0b11);
        assert_eq!((y * y).coeffs(), &[9.0, 6.0, 6.0, 2.0]);
        // a single tag squares to zero
        let t = Jet::from_coeffs(1, &[0.0, 1.0]);
        assert_eq!((t * t).coeffs(), &[0.0, 0.0]);
    }

    #[test]
    fn reciprocal_and_power_series() {
        let y = Jet::seeded(3, 2.0, 0b111);
        let r = y.reciprocal();
        // d^3/dy^3 (1/y) = -6/y^4
        assert!((r.top() + 6.0 / 16.0).abs() < 1e-15);
        let s = y.power(0.5);
        // d^3/dy^3 sqrt(y) = 3/8 y^{-5/2}
        assert!((s.top() - 0.375 * 2f64.powf(-2.5)).abs() < 1e-15);
        assert_eq!(y.integer_power(3).top(), 6.0);
    }

    #[test]
    fn second_derivative_of_square() {
        let e = parse_metric("y1^2", 1).unwrap();
        let p = point(&[0.3], &[1.7]);
        assert_eq!(mixed_partial(&e, &req(&p, &[Var::y(1), Var::y(1)])).unwrap(), 2.0);
    }

    #[test]
    fn quartic_root_hessian_and_x_derivative() {
        let f2 = parse_metric("sqrt(y1^4+y2^4+y3^4)+x4*y4^2", 4).unwrap();
        let p = point(&[0.0, 0.0, 0.0, 1.0], &[1.0, 1.0, 1.0, 2.0]);
        let yy = [Var::y(4), Var::y(4)];
        assert_eq!(mixed_partial(&f2, &req(&p, &yy)).unwrap(), 2.0);
        let xyy = [Var::x(4), Var::y(4), Var::y(4)];
        assert_eq!(mixed_partial(&f2, &req(&p, &xyy)).unwrap(), 2.0);
        let fd = fd_partial(&f2, &req(&p, &yy), 1e-2).unwrap();
        assert!((fd - 2.0).abs() < 1e-9);
    }

    #[test]
    fn gradients() {
        let e = parse_metric("y1^2+y2^2", 2).unwrap();
        let p = point(&[0.0, 0.0], &[3.0, 4.0]);
        assert_eq!(gradient_y(&e, &p).unwrap(), vec![6.0, 8.0]);
        assert_eq!(gradient_x(&e, &p).unwrap(), vec![0.0, 0.0]);

        // Randers-type metric with c = 1, a = 0: d_j F^2 = 2 F y_j
        let f2 = parse_metric("(sqrt(y1^2+y2^2) + x1*y1 + x2*y2)^2", 2).unwrap();
        assert_eq!(gradient_x(&f2, &p).unwrap(), vec![30.0, 40.0]);
    }

    #[test]
    fn request_bounds_are_enforced() {
        let p = point(&[0.0], &[1.0]);
        assert!(DerivativeRequest::new(p.clone(), vec![Var::y(1); 6]).is_err());
        assert!(DerivativeRequest::new(p.clone(), vec![Var::x(1); 2]).is_err());
        assert!(DerivativeRequest::new(p.clone(), vec![Var::y(2)]).is_err());
        let mut ok = vec![Var::y(1); 5];
        ok.push(Var::x(1));
        assert!(DerivativeRequest::new(p, ok).is_ok());
        let e = Expr::y(1);
        assert!(lift(&e, &[0.0], &[1.0], &[Var::y(1); 7]).is_err());
    }

    #[test]
    fn fd_matches_ad_on_cubic() {
        let e = parse_metric("y1^3", 1).unwrap();
        let p = point(&[0.0], &[1.3]);
        for order in 1..=3 {
            let r = req(&p, &vec![Var::y(1); order]);
            let ad = mixed_partial(&e, &r).unwrap();
            let fd = fd_partial(&e, &r, 1e-2).unwrap();
            assert!(
                (ad - fd).abs() <= 1e-8 * ad.abs().max(1.0),
                "order {order}: {ad} vs {fd}"
            );
        }
    }

    #[test]
    fn fifth_fiber_derivative_of_quartic_vanishes() {
        let e = parse_metric("y1^4 + 3*y1^2*y2^2 - y2^3*y1", 2).unwrap();
        let p = point(&[0.0, 0.0], &[0.8, -1.1]);
        let vars = [Var::y(1), Var::y(1), Var::y(2), Var::y(1), Var::y(2)];
        let r = req(&p, &vars);
        assert_eq!(mixed_partial(&e, &r).unwrap(), 0.0);
        assert!(fd_partial(&e, &r, 5e-2).unwrap().abs() < 1e-4);
    }

    #[test]
    fn fd_matches_ad_on_quartic_root_order_three() {
        let f2 = parse_metric("sqrt(y1^4+y2^4+y3^4)+x4*y4^2", 4).unwrap();
        let p = point(&[0.2, -0.1, 0.4, 0.7], &[1.1, -0.6, 0.9, 1.4]);
        let requests: [[Var; 3]; 4] = [
            [Var::y(1), Var::y(1), Var::y(1)],
            [Var::y(1), Var::y(2), Var::y(3)],
            [Var::x(4), Var::y(4), Var::y(4)],
            [Var::y(2), Var::y(2), Var::y(3)],
        ];
        for vars in requests {
            let r = req(&p, &vars);
            let ad = mixed_partial(&f2, &r).unwrap();
            let fd = fd_partial_with_steps(&f2, &r, &default_fd_steps(&r)).unwrap();
            assert!((ad - fd).abs() <= 1e-5 * ad.abs().max(1.0), "{vars:?}: {ad} vs {fd}");
        }
    }

    #[test]
    fn fd_reaches_fifth_order_on_rational_metric() {
        let f2 = parse_metric("(y1^4 + y1^2*y3^2 + y2^2*y3^2)/(y1^2 + y2^2 + y3^2) + x3^2*y1^2", 3).unwrap();
        let p = point(&[-0.4, 0.5, 1.2], &[-0.75, -0.15, -0.1]);
        let r = req(&p, &[Var::y(1), Var::y(1), Var::y(1), Var::y(1), Var::y(3)]);
        let ad = mixed_partial(&f2, &r).unwrap();
        for h in [1e-3, 1e-4] {
            let fd = fd_partial_with_steps(&f2, &r, &[h; 5]).unwrap();
            assert!((ad - fd).abs() <= 1e-7 * ad.abs().max(1.0), "h {h}: {ad} vs {fd}");
        }
    }

    #[test]
    fn sqrt_at_zero_is_rejected_only_when_differentiated() {
        let e = parse_metric("sqrt(x1)", 1).unwrap();
        assert!(lift(&e, &[0.0], &[1.0], &[Var::x(1)]).is_err());
        // no tag depends on x1, so the nilpotent part vanishes
        assert_eq!(lift(&e, &[0.0], &[1.0], &[Var::y(1)]).unwrap().top(), 0.0);
    }

    fn sample_expr() -> Expr {
        parse_metric("sqrt(y1^2 + 2*y2^2 + x1*y1*y2)/(1 + x2^2) + y1^3/y2", 2).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn schwarz_symmetry(perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
                            y1 in 0.5f64..2.0, y2 in 0.5f64..2.0, x1 in -0.3f64..0.3) {
            let e = sample_expr();
            let p = point(&[x1, 0.2], &[y1, y2]);
            let base = [Var::y(1), Var::y(2), Var::x(1), Var::y(2)];
            let shuffled: Vec<Var> = perm.iter().map(|&i| base[i]).collect();
            let a = mixed_partial(&e, &req(&p, &base)).unwrap();
            let b = mixed_partial(&e, &req(&p, &shuffled)).unwrap();
            prop_assert_eq!(a, b);
            // raw lifting without canonicalization agrees to roundoff
            let raw = lift(&e, &p.x, &p.y, &shuffled).unwrap().top();
            prop_assert!((raw - a).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn linearity(alpha in -3.0f64..3.0, beta in -3.0f64..3.0,
                     y1 in 0.5f64..2.0, y2 in 0.5f64..2.0) {
            let e1 = sample_expr();
            let e2 = parse_metric("x1*y1^2*y2 + sqrt(y1^2+y2^2)", 2).unwrap();
            let combo = Expr::Num(alpha) * e1.clone() + Expr::Num(beta) * e2.clone();
            let p = point(&[0.1, -0.2], &[y1, y2]);
            let r = req(&p, &[Var::y(1), Var::y(1), Var::y(2)]);
            let lhs = mixed_partial(&combo, &r).unwrap();
            let rhs = alpha * mixed_partial(&e1, &r).unwrap() + beta * mixed_partial(&e2, &r).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
        }

        #[test]
        fn empty_subset_is_plain_value(y1 in 0.5f64..2.0, y2 in 0.5f64..2.0) {
            let e = sample_expr();
            let jet = lift(&e, &[0.1, 0.2], &[y1, y2], &[Var::y(1), Var::x(2), Var::y(2)]).unwrap();
            let plain = evaluate_at(&e, &[0.1, 0.2], &[y1, y2]).unwrap();
            prop_assert_eq!(jet.value(), plain);
        }
    }
}
