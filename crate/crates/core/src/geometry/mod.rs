//! Pointwise evaluation of the tensors a Finsler function induces.

mod identities;
mod point;
mod table;

pub(crate) use identities::{cyclic, indices, merge, scaled, sum, Sum};
pub use identities::{identity_residuals, IdentityKind, IdentityResidual, SUPERSEDED};
pub(crate) use point::h_deriv_scale;
pub use point::{
    cartan_ladder, connections, covariant_coefficients, h_ladder, metric_tensor, s_scalar_candidate,
    spray_coefficients, CartanLadder, Connections, HLadder, PointGeometry,
};
pub use table::DerivativeTable;

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{evaluate_at, substitute, Expr, MetricDefinition, MetricSource, Var};

/// Condition-number ceiling above which `g` counts as degenerate.
pub const MAX_CONDITION: f64 = 1e12;

/// An evaluation site `(x, y)` on the slit tangent bundle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChartPoint {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl ChartPoint {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: y.len(),
            });
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPoint("coordinates must be finite".into()));
        }
        if y.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidPoint("y = 0 lies outside the slit tangent bundle".into()));
        }
        Ok(ChartPoint { x, y })
    }

    pub fn dimension(&self) -> usize {
        self.x.len()
    }

    pub fn y_norm(&self) -> f64 {
        self.y.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Same position, fiber scaled by `lambda`.
    pub fn scaled(&self, lambda: f64) -> Result<Self> {
        ChartPoint::new(self.x.clone(), self.y.iter().map(|v| v * lambda).collect())
    }
}

/// A parameter-free Finsler function ready for evaluation.
#[derive(Debug, Clone)]
pub struct FinslerMetric {
    pub name: String,
    pub dimension: usize,
    pub f: Expr,
    /// `F^2`, built without the outer square root when `F` is one.
    pub f2: Expr,
    pub domain: Option<Expr>,
    /// Profile `phi(r, s)` (r as `x1`, s as `y1`) for spherically symmetric metrics.
    pub profile: Option<Expr>,
}

fn square(f: &Expr) -> Expr {
    match f {
        Expr::Sqrt(inner) => (**inner).clone(),
        Expr::Pow(base, p) if *p == 0.5 => (**base).clone(),
        other => other.clone() * other.clone(),
    }
}

/// `F = |y| phi(|x|, <x,y>/|y|)` as an expression in the n-dimensional chart.
pub fn spherical_metric_expr(phi: &Expr, dimension: usize) -> Result<Expr> {
    let sum_sq = |v: fn(usize) -> Expr| (2..=dimension).fold(v(1).powf(2.0), |acc, i| acc + v(i).powf(2.0));
    let u = sum_sq(Expr::y).sqrt();
    let r = sum_sq(Expr::x).sqrt();
    let dot = (2..=dimension).fold(Expr::x(1) * Expr::y(1), |acc, i| acc + Expr::x(i) * Expr::y(i));
    let s = dot / u.clone();
    let bindings: BTreeMap<Var, Expr> = [(Var::x(1), r), (Var::y(1), s)].into_iter().collect();
    Ok(u * substitute(phi, &bindings, dimension)?)
}

impl FinslerMetric {
    pub fn new(name: impl Into<String>, f: Expr, dimension: usize) -> Result<Self> {
        if let Some(p) = f.parameters().into_iter().next() {
            return Err(Error::UnboundParameter(p));
        }
        if f.max_index() > dimension {
            return Err(Error::DimensionMismatch {
                expected: dimension,
                found: f.max_index(),
            });
        }
        Ok(FinslerMetric {
            name: name.into(),
            dimension,
            f2: square(&f),
            f,
            domain: None,
            profile: None,
        })
    }

    pub fn from_definition(def: &MetricDefinition) -> Result<Self> {
        let bind = |e: &Expr| e.bind_params(&def.params);
        let mut metric = match &def.source {
            MetricSource::Expression(e) => FinslerMetric::new(&def.name, bind(e), def.dimension)?,
            MetricSource::Spherical(phi) => {
                let phi = bind(phi);
                let f = spherical_metric_expr(&phi, def.dimension)?;
                let mut m = FinslerMetric::new(&def.name, f, def.dimension)?;
                m.profile = Some(phi);
                m
            }
        };
        metric.domain = def.domain.as_ref().map(bind);
        Ok(metric)
    }

    pub fn value(&self, p: &ChartPoint) -> Result<f64> {
        evaluate_at(&self.f, &p.x, &p.y)
    }

    /// Checks the site against the domain expression and `F > 0`.
    pub fn check_point(&self, p: &ChartPoint) -> Result<()> {
        if p.dimension() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                found: p.dimension(),
            });
        }
        if let Some(d) = &self.domain {
            let v = evaluate_at(d, &p.x, &p.y)?;
            if !(v > 0.0) {
                return Err(Error::InvalidPoint(format!(
                    "domain expression `{d}` evaluates to {v}, must be positive"
                )));
            }
        }
        let f = self.value(p)?;
        if !(f > 0.0) {
            return Err(Error::InvalidPoint(format!("F = {f} is not positive")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_metric;

    #[test]
    fn chart_point_rejects_zero_fiber() {
        assert!(ChartPoint::new(vec![0.0, 0.0], vec![0.0, 0.0]).is_err());
        assert!(ChartPoint::new(vec![0.0], vec![1.0, 0.0]).is_err());
        assert!(ChartPoint::new(vec![0.0], vec![f64::NAN]).is_err());
        assert_eq!(ChartPoint::new(vec![0.0, 0.0], vec![3.0, 4.0]).unwrap().y_norm(), 5.0);
    }

    #[test]
    fn square_drops_outer_root() {
        let f = parse_metric("sqrt(y1^2+y2^2)", 2).unwrap();
        let m = FinslerMetric::new("e", f, 2).unwrap();
        assert_eq!(m.f2.to_string(), "y1^2 + y2^2");
        let r = parse_metric("sqrt(y1^2+y2^2) + x1*y1", 2).unwrap();
        let m = FinslerMetric::new("r", r, 2).unwrap();
        assert!(matches!(m.f2, Expr::Mul(..)));
    }

    #[test]
    fn unbound_parameters_are_rejected() {
        let f = Expr::param("c") * Expr::y(1);
        assert!(matches!(FinslerMetric::new("c", f, 1), Err(Error::UnboundParameter(_))));
    }

    #[test]
    fn spherical_expression_matches_profile() {
        let text = "dimension = 2\nspherical_phi = \"1 + s/4 + r^2\"\n";
        let def = MetricDefinition::parse("sph", text).unwrap();
        let m = FinslerMetric::from_definition(&def).unwrap();
        let p = ChartPoint::new(vec![0.3, 0.4], vec![1.0, 2.0]).unwrap();
        let u = 5f64.sqrt();
        let s = (0.3 + 0.8) / u;
        let expected = u * (1.0 + s / 4.0 + 0.25);
        assert!((m.value(&p).unwrap() - expected).abs() < 1e-14);
    }
}
