use std::collections::BTreeMap;
use std::sync::Arc;

use super::{evaluate_at, Expr, Var, VarKind};
use crate::error::{Error, Result};

// Builders used by differentiation. Besides folding numeric constants they
// drop additive zeros and multiplicative ones; without this the derivative of
// a product chain grows quadratically in dead `0*...` terms.

fn is_zero(e: &Expr) -> bool {
    e.as_num() == Some(0.0)
}

fn is_one(e: &Expr) -> bool {
    e.as_num() == Some(1.0)
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a.as_num(), b.as_num()) {
        (Some(u), Some(v)) => Expr::Num(u + v),
        _ if is_zero(&a) => b,
        _ if is_zero(&b) => a,
        _ => a + b,
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a.as_num(), b.as_num()) {
        (Some(u), Some(v)) => Expr::Num(u - v),
        _ if is_zero(&b) => a,
        _ if is_zero(&a) => neg(b),
        _ => a - b,
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a.as_num(), b.as_num()) {
        (Some(u), Some(v)) => Expr::Num(u * v),
        _ if is_zero(&a) || is_zero(&b) => Expr::Num(0.0),
        _ if is_one(&a) => b,
        _ if is_one(&b) => a,
        _ => a * b,
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a.as_num(), b.as_num()) {
        (Some(u), Some(v)) if v != 0.0 => Expr::Num(u / v),
        _ if is_zero(&a) => Expr::Num(0.0),
        _ if is_one(&b) => a,
        _ => a / b,
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => Expr::Num(-v),
        Expr::Neg(inner) => (*inner).clone(),
        other => -other,
    }
}

fn pow(a: Expr, p: f64) -> Expr {
    if p == 0.0 {
        return Expr::Num(1.0);
    }
    if p == 1.0 {
        return a;
    }
    a.powf(p)
}

/// Exact symbolic partial derivative of `e` with respect to `var`.
pub fn differentiate(e: &Expr, var: Var) -> Expr {
    match e {
        Expr::Num(_) | Expr::Param(_) => Expr::Num(0.0),
        Expr::Var(v) => Expr::Num(if *v == var { 1.0 } else { 0.0 }),
        Expr::Neg(a) => neg(differentiate(a, var)),
        Expr::Add(a, b) => add(differentiate(a, var), differentiate(b, var)),
        Expr::Sub(a, b) => sub(differentiate(a, var), differentiate(b, var)),
        Expr::Mul(a, b) => add(
            mul(differentiate(a, var), (**b).clone()),
            mul((**a).clone(), differentiate(b, var)),
        ),
        Expr::Div(a, b) => {
            let da = differentiate(a, var);
            let db = differentiate(b, var);
            if is_zero(&db) {
                return div(da, (**b).clone());
            }
            div(
                sub(mul(da, (**b).clone()), mul((**a).clone(), db)),
                pow((**b).clone(), 2.0),
            )
        }
        Expr::Pow(a, p) => {
            let da = differentiate(a, var);
            if is_zero(&da) {
                return Expr::Num(0.0);
            }
            mul(mul(Expr::Num(*p), pow((**a).clone(), p - 1.0)), da)
        }
        Expr::Sqrt(a) => {
            let da = differentiate(a, var);
            if is_zero(&da) {
                return Expr::Num(0.0);
            }
            div(da, mul(Expr::Num(2.0), e.clone()))
        }
    }
}

/// Simultaneous substitution of variables. Every variable left in the result
/// (replacements and untouched variables alike) must fit `target_dimension`.
pub fn substitute(e: &Expr, bindings: &BTreeMap<Var, Expr>, target_dimension: usize) -> Result<Expr> {
    for replacement in bindings.values() {
        let max = replacement.max_index();
        if max > target_dimension {
            return Err(Error::DimensionMismatch {
                expected: target_dimension,
                found: max,
            });
        }
    }
    for v in e.variables() {
        if !bindings.contains_key(&v) && v.index > target_dimension {
            return Err(Error::DimensionMismatch {
                expected: target_dimension,
                found: v.index,
            });
        }
    }
    Ok(substitute_unchecked(e, bindings))
}

fn substitute_unchecked(e: &Expr, bindings: &BTreeMap<Var, Expr>) -> Expr {
    let rec = |a: &Arc<Expr>| Arc::new(substitute_unchecked(a, bindings));
    match e {
        Expr::Var(v) => bindings.get(v).cloned().unwrap_or_else(|| e.clone()),
        Expr::Num(_) | Expr::Param(_) => e.clone(),
        Expr::Neg(a) => Expr::Neg(rec(a)),
        Expr::Sqrt(a) => Expr::Sqrt(rec(a)),
        Expr::Pow(a, p) => Expr::Pow(rec(a), *p),
        Expr::Add(a, b) => Expr::Add(rec(a), rec(b)),
        Expr::Sub(a, b) => Expr::Sub(rec(a), rec(b)),
        Expr::Mul(a, b) => Expr::Mul(rec(a), rec(b)),
        Expr::Div(a, b) => Expr::Div(rec(a), rec(b)),
    }
}

/// A change of chart `x = psi(x~)` with its symbolic first and second
/// derivatives. In the new chart the variables `x1..xn` stand for `x~`.
#[derive(Debug, Clone)]
pub struct CoordinateChange {
    pub dimension: usize,
    pub psi: Vec<Expr>,
    /// `jacobian[a][b] = d psi_a / d x~_b`
    pub jacobian: Vec<Vec<Expr>>,
    /// `hessian[a][b][c] = d^2 psi_a / d x~_b d x~_c`
    pub hessian: Vec<Vec<Vec<Expr>>>,
}

impl CoordinateChange {
    pub fn new(psi: Vec<Expr>, dimension: usize) -> Result<Self> {
        if psi.len() != dimension {
            return Err(Error::DimensionMismatch {
                expected: dimension,
                found: psi.len(),
            });
        }
        for (a, component) in psi.iter().enumerate() {
            for v in component.variables() {
                if v.kind == VarKind::Fiber {
                    return Err(Error::CoordinateChange(format!(
                        "component {} depends on fiber variable {v}",
                        a + 1
                    )));
                }
                if v.index > dimension {
                    return Err(Error::DimensionMismatch {
                        expected: dimension,
                        found: v.index,
                    });
                }
            }
            if !component.parameters().is_empty() {
                return Err(Error::CoordinateChange(format!(
                    "component {} has unbound parameters",
                    a + 1
                )));
            }
        }
        let jacobian: Vec<Vec<Expr>> = psi
            .iter()
            .map(|p| (1..=dimension).map(|b| differentiate(p, Var::x(b))).collect())
            .collect();
        let hessian = jacobian
            .iter()
            .map(|row| {
                row.iter()
                    .map(|d| (1..=dimension).map(|c| differentiate(d, Var::x(c))).collect())
                    .collect()
            })
            .collect();
        Ok(CoordinateChange {
            dimension,
            psi,
            jacobian,
            hessian,
        })
    }

    pub fn identity(dimension: usize) -> Self {
        let psi = (1..=dimension).map(Expr::x).collect();
        CoordinateChange::new(psi, dimension).expect("identity map is valid")
    }

    /// `x = A x~ + b`, with `a` given row-major.
    pub fn affine(a: &[Vec<f64>], b: &[f64]) -> Result<Self> {
        let n = b.len();
        let psi = (0..n)
            .map(|i| {
                let mut e = Expr::Num(b[i]);
                for (j, coeff) in a[i].iter().enumerate() {
                    e = add(e, mul(Expr::Num(*coeff), Expr::x(j + 1)));
                }
                e
            })
            .collect();
        CoordinateChange::new(psi, n)
    }

    /// True when every second derivative is symbolically zero.
    pub fn is_affine(&self) -> bool {
        self.hessian.iter().flatten().flatten().all(is_zero)
    }

    pub fn position_at(&self, xt: &[f64]) -> Result<Vec<f64>> {
        self.psi.iter().map(|p| evaluate_at(p, xt, &[])).collect()
    }

    fn matrix_at(&self, exprs: &[Vec<Expr>], xt: &[f64]) -> Result<Vec<Vec<f64>>> {
        exprs
            .iter()
            .map(|row| row.iter().map(|e| evaluate_at(e, xt, &[])).collect())
            .collect()
    }

    /// Jacobian `dx/dx~` at `x~`; errors when it is numerically singular.
    pub fn jacobian_at(&self, xt: &[f64]) -> Result<Vec<Vec<f64>>> {
        let j = self.matrix_at(&self.jacobian, xt)?;
        let det = crate::linalg::determinant(&j);
        let scale: f64 = j.iter().flatten().fold(0.0, |m, v| m.max(v.abs()));
        if !(det.abs() > 1e-12 * scale.powi(self.dimension as i32)) {
            return Err(Error::SingularJacobian {
                at: xt.to_vec(),
                det: det.abs(),
            });
        }
        Ok(j)
    }

    pub fn hessian_at(&self, xt: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
        self.hessian.iter().map(|m| self.matrix_at(m, xt)).collect()
    }

    /// Maps a point of the new chart to the old one: `(psi(x~), Dpsi(x~) y~)`.
    pub fn pull_back(&self, xt: &[f64], yt: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let j = self.jacobian_at(xt)?;
        let x = self.position_at(xt)?;
        let y = j
            .iter()
            .map(|row| row.iter().zip(yt).map(|(a, b)| a * b).sum())
            .collect();
        Ok((x, y))
    }

    /// Builds `F~(x~, y~) = F(psi(x~), Dpsi(x~) y~)`.
    pub fn apply(&self, f: &Expr) -> Result<Expr> {
        let n = self.dimension;
        let mut bindings = BTreeMap::new();
        for a in 0..n {
            bindings.insert(Var::x(a + 1), self.psi[a].clone());
            let mut y = Expr::Num(0.0);
            for b in 0..n {
                y = add(y, mul(self.jacobian[a][b].clone(), Expr::y(b + 1)));
            }
            bindings.insert(Var::y(a + 1), y);
        }
        substitute(f, &bindings, n)
    }
}

/// `F~(x~, y~) = F(psi(x~), Dpsi(x~) y~)` for `x = psi(x~)`.
pub fn change_coordinates(f: &Expr, psi: Vec<Expr>) -> Result<Expr> {
    let n = psi.len();
    CoordinateChange::new(psi, n)?.apply(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{evaluate, parse_metric, Environment};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn env(x: &[f64], y: &[f64]) -> Environment {
        Environment::new(x.to_vec(), y.to_vec()).unwrap()
    }

    #[test]
    fn derivative_of_sum_of_squares() {
        let e = parse_metric("y1^2+y2^2", 2).unwrap();
        let d = differentiate(&e, Var::y(1));
        assert_eq!(d, Expr::Num(2.0) * Expr::y(1));
        assert_eq!(d.to_string(), "2*y1");
    }

    #[test]
    fn derivative_of_x4_y4_squared() {
        let e = parse_metric("x4*y4^2", 4).unwrap();
        let d = differentiate(&e, Var::y(4));
        let at = env(&[0.0, 0.0, 0.0, 1.5], &[1.0, 1.0, 1.0, 3.0]);
        assert_eq!(evaluate(&d, &at).unwrap(), 2.0 * 1.5 * 3.0);
        assert_eq!(d.to_string(), "x4*(2*y4)");
    }

    #[test]
    fn derivative_of_najafi_phi_in_s() {
        // r -> x1, s -> x2
        let phi = parse_metric("(sqrt((1 - 0.09*x1^2) + 0.09*x2^2) + 0.3*x2)/(1 - 0.09*x1^2)", 2).unwrap();
        let d = differentiate(&phi, Var::x(2));
        let value = evaluate(&d, &env(&[0.0, 0.0], &[1.0, 1.0])).unwrap();
        // central difference oracle on the closed form phi
        let f = |s: f64| (f64::sqrt(1.0 + 0.09 * s * s) + 0.3 * s) / 1.0;
        let h = 1e-4;
        let fd = (f(h) - f(-h)) / (2.0 * h);
        assert!((value - 0.3).abs() < 1e-15);
        assert!((fd - 0.3).abs() < 1e-8);
    }

    #[test]
    fn substitution_shifts_a_variable() {
        let e = parse_metric("x1*y1", 1).unwrap();
        let mut b = BTreeMap::new();
        b.insert(Var::x(1), parse_metric("x1+1", 1).unwrap());
        let s = substitute(&e, &b, 1).unwrap();
        assert_eq!(s.to_string(), "(x1 + 1)*y1");
    }

    #[test]
    fn identity_substitution_is_structural_identity() {
        let e = parse_metric("sqrt(y1^2+y2^2) + x1*y1/x2", 2).unwrap();
        let b: BTreeMap<Var, Expr> = [Var::x(1), Var::x(2), Var::y(1), Var::y(2)]
            .into_iter()
            .map(|v| (v, Expr::Var(v)))
            .collect();
        assert_eq!(substitute(&e, &b, 2).unwrap(), e);
    }

    #[test]
    fn substitution_rejects_dimension_mismatch() {
        let e = parse_metric("x1*y1", 1).unwrap();
        let mut b = BTreeMap::new();
        b.insert(Var::x(1), Expr::x(3));
        assert!(matches!(substitute(&e, &b, 2), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn coordinate_change_composition_agrees_numerically() {
        let f = parse_metric("sqrt(y1^2+y2^2) + x1*y1 + x2*y2", 2).unwrap();
        let psi = vec![
            parse_metric("x1 + 0.1*x1^2", 2).unwrap(),
            parse_metric("x2 + 0.1*x2^2", 2).unwrap(),
        ];
        let change = CoordinateChange::new(psi, 2).unwrap();
        let ft = change.apply(&f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let xt: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let yt: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (x, y) = change.pull_back(&xt, &yt).unwrap();
            let lhs = evaluate(&ft, &env(&xt, &yt)).unwrap();
            let rhs = evaluate(&f, &env(&x, &y)).unwrap();
            assert!((lhs - rhs).abs() <= 1e-13 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn affine_change_of_euclidean_metric_is_norm_of_image() {
        let f = parse_metric("sqrt(y1^2+y2^2)", 2).unwrap();
        let a = vec![vec![2.0, 1.0], vec![-0.5, 3.0]];
        let change = CoordinateChange::affine(&a, &[0.3, -1.0]).unwrap();
        assert!(change.is_affine());
        let ft = change.apply(&f).unwrap();
        let yt = [0.7, -1.3];
        let ay = [2.0 * 0.7 + 1.0 * -1.3, -0.5 * 0.7 + 3.0 * -1.3];
        let expected = f64::hypot(ay[0], ay[1]);
        let got = evaluate(&ft, &env(&[0.1, 0.2], &yt)).unwrap();
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn identity_change_leaves_values_unchanged() {
        let f = parse_metric("sqrt(sqrt(y1^4+y2^4)+x2*y2^2)", 2).unwrap();
        let ft = change_coordinates(&f, vec![Expr::x(1), Expr::x(2)]).unwrap();
        let at = env(&[0.3, 0.8], &[1.0, -0.4]);
        assert_eq!(evaluate(&ft, &at).unwrap(), evaluate(&f, &at).unwrap());
    }

    #[test]
    fn singular_jacobian_is_reported() {
        let psi = vec![parse_metric("x1^3", 1).unwrap()];
        let change = CoordinateChange::new(psi, 1).unwrap();
        assert!(matches!(
            change.jacobian_at(&[0.0]),
            Err(Error::SingularJacobian { .. })
        ));
        assert!(change.jacobian_at(&[0.5]).is_ok());
    }

    #[test]
    fn fiber_dependent_map_is_rejected() {
        let psi = vec![Expr::y(1)];
        assert!(matches!(CoordinateChange::new(psi, 1), Err(Error::CoordinateChange(_))));
    }
}
