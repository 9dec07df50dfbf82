//! Closed forms for spherically symmetric metrics `F = u phi(r, s)` with
//! `u = |y|`, `r = |x|`, `s = <x, y>/|y|`.
//!
//! Lowered indices here always mean the Euclidean lowering `y_i = delta_ih y^h`.
//! The profile `phi` is an expression with `r` stored as `x1` and `s` as `y1`.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{Expr, Var};
use crate::geometry::{spherical_metric_expr, ChartPoint, FinslerMetric};
use crate::jets::lift;

/// Below this radius `P` and `Q` are not evaluated (they carry `1/r`).
pub const MIN_RADIUS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct SphericalMetric {
    pub phi: Expr,
    pub dimension: usize,
    /// Radius of the ball the metric lives on.
    pub r0: f64,
}

/// `phi` and the partials the closed forms use, at one `(r, s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhiJet {
    pub r: f64,
    pub s: f64,
    pub phi: f64,
    pub phi_r: f64,
    pub phi_s: f64,
    pub phi_ss: f64,
    pub phi_rs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SigmaSet {
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

/// `(u, r, s)` at a chart point.
pub fn polar(p: &ChartPoint) -> (f64, f64, f64) {
    let u = p.y_norm();
    let r = p.x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = p.x.iter().zip(&p.y).map(|(a, b)| a * b).sum();
    (u, r, dot / u)
}

pub fn sigma(j: &PhiJet) -> SigmaSet {
    let (phi, ps, pss, s) = (j.phi, j.phi_s, j.phi_ss, j.s);
    let a = phi - s * ps;
    SigmaSet {
        s0: phi * a,
        s1: ps * ps + phi * pss,
        s2: a * ps - s * phi * pss,
        s3: s * s * phi * pss - s * a * ps,
    }
}

/// The factors in `G^i = u P y^i + u^2 Q x^i`.
pub fn pq(j: &PhiJet) -> Result<(f64, f64)> {
    let PhiJet {
        r,
        s,
        phi,
        phi_r,
        phi_s,
        phi_ss,
        phi_rs,
    } = *j;
    if r < MIN_RADIUS {
        return Err(Error::Spherical(format!(
            "r = {r:e} is below {MIN_RADIUS:e}; P and Q are only evaluated away from the origin"
        )));
    }
    let den = phi - s * phi_s + (r * r - s * s) * phi_ss;
    if den.abs() < 1e-12 {
        return Err(Error::Spherical(format!(
            "degenerate profile: phi - s phi_s + (r^2 - s^2) phi_ss = {den:e}"
        )));
    }
    let q = (-phi_r + s * phi_rs + r * phi_ss) / (2.0 * r * den);
    let p = -q / phi * (s * phi + (r * r - s * s) * phi_s) + (s * phi_r + r * phi_s) / (2.0 * r * phi);
    Ok((p, q))
}

impl SphericalMetric {
    pub fn new(phi: Expr, dimension: usize, r0: f64) -> Result<Self> {
        if let Some(p) = phi.parameters().into_iter().next() {
            return Err(Error::UnboundParameter(p));
        }
        if phi.max_index() > 1 {
            return Err(Error::Spherical("a profile may only use r and s".into()));
        }
        if !(r0 > 0.0) {
            return Err(Error::Spherical(format!("ball radius must be positive, got {r0}")));
        }
        Ok(SphericalMetric { phi, dimension, r0 })
    }

    /// The profile of a metric built from a `spherical_phi` definition.
    pub fn from_metric(m: &FinslerMetric, r0: f64) -> Option<Result<Self>> {
        m.profile.clone().map(|phi| SphericalMetric::new(phi, m.dimension, r0))
    }

    pub fn metric(&self, name: &str) -> Result<FinslerMetric> {
        let f = spherical_metric_expr(&self.phi, self.dimension)?;
        let mut m = FinslerMetric::new(name, f, self.dimension)?;
        m.profile = Some(self.phi.clone());
        Ok(m)
    }

    pub fn phi_jet(&self, r: f64, s: f64) -> Result<PhiJet> {
        let jet = lift(&self.phi, &[r], &[s], &[Var::x(1), Var::y(1), Var::y(1)])?;
        Ok(PhiJet {
            r,
            s,
            phi: jet.coeff(0),
            phi_r: jet.coeff(0b001),
            phi_s: jet.coeff(0b010),
            phi_ss: jet.coeff(0b110),
            phi_rs: jet.coeff(0b011),
        })
    }

    fn jet_at(&self, p: &ChartPoint) -> Result<(f64, PhiJet)> {
        if p.dimension() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                found: p.dimension(),
            });
        }
        let (u, r, s) = polar(p);
        if r >= self.r0 {
            return Err(Error::InvalidPoint(format!(
                "|x| = {r} lies outside the ball of radius {}",
                self.r0
            )));
        }
        Ok((u, self.phi_jet(r, s)?))
    }

    /// `g_ij = s0 delta_ij + s1 x_i x_j + s2/u (x_i y_j + x_j y_i) + s3/u^2 y_i y_j`.
    pub fn metric_tensor(&self, p: &ChartPoint) -> Result<Array2<f64>> {
        let (u, j) = self.jet_at(p)?;
        let sg = sigma(&j);
        let (x, y) = (&p.x, &p.y);
        Ok(Array2::from_shape_fn((self.dimension, self.dimension), |(a, b)| {
            let d = if a == b { sg.s0 } else { 0.0 };
            d + sg.s1 * x[a] * x[b] + sg.s2 / u * (x[a] * y[b] + x[b] * y[a]) + sg.s3 / (u * u) * y[a] * y[b]
        }))
    }

    /// `G^i = u P y^i + u^2 Q x^i`.
    pub fn spray(&self, p: &ChartPoint) -> Result<Array1<f64>> {
        let (u, j) = self.jet_at(p)?;
        let (pp, q) = pq(&j)?;
        Ok(Array1::from_shape_fn(self.dimension, |i| {
            u * pp * p.y[i] + u * u * q * p.x[i]
        }))
    }

    /// `H_j = u (P s0 + (r^2 - s^2) s2 Q) y_j + u^2 (P phi phi_s + (phi^2 + (r^2 - s^2) s1) Q) x_j`.
    pub fn covariant(&self, p: &ChartPoint) -> Result<Array1<f64>> {
        let (u, j) = self.jet_at(p)?;
        let (pp, q) = pq(&j)?;
        let sg = sigma(&j);
        let w = j.r * j.r - j.s * j.s;
        let cy = u * (pp * sg.s0 + w * sg.s2 * q);
        let cx = u * u * (pp * j.phi * j.phi_s + (j.phi * j.phi + w * sg.s1) * q);
        Ok(Array1::from_shape_fn(self.dimension, |i| cy * p.y[i] + cx * p.x[i]))
    }
}

/// `phi(r, s) = (sqrt(k^2 - c^2 r^2 + c^2 s^2) + c s) / (k^2 - c^2 r^2)`.
pub fn najafi_phi(k: f64, c: f64) -> Expr {
    let r = Expr::x(1);
    let s = Expr::y(1);
    let a = Expr::num(k * k) - Expr::num(c * c) * r.powf(2.0);
    ((a.clone() + Expr::num(c * c) * s.clone().powf(2.0)).sqrt() + Expr::num(c) * s) / a
}

/// The same metric written directly in chart coordinates, which stays smooth
/// at `x = 0`: `(sqrt(A |y|^2 + c^2 <x,y>^2) + c <x,y>) / A` with
/// `A = k^2 - c^2 |x|^2`.
pub fn najafi_metric_text(dimension: usize) -> String {
    let join = |f: &dyn Fn(usize) -> String| (1..=dimension).map(f).collect::<Vec<_>>().join(" + ");
    let yy = join(&|i| format!("y{i}^2"));
    let xx = join(&|i| format!("x{i}^2"));
    let xy = join(&|i| format!("x{i}*y{i}"));
    format!("(sqrt(({yy})*(k^2 - c^2*({xx})) + c^2*({xy})^2) + c*({xy}))/(k^2 - c^2*({xx}))")
}

fn najafi_root(k: f64, c: f64, r: f64, s: f64) -> f64 {
    (-c * c * r * r + c * c * s * s + k * k).sqrt()
}

/// `H = -(1/6) c u^3 (sqrt(-c^2 r^2 + c^2 s^2 + k^2) + c s)^3 / (c^2 r^2 - k^2)^3`.
pub fn najafi_s_scalar(k: f64, c: f64, p: &ChartPoint) -> f64 {
    let (u, r, s) = polar(p);
    let num = najafi_root(k, c, r, s) + c * s;
    -c * u.powi(3) * num.powi(3) / (6.0 * (c * c * r * r - k * k).powi(3))
}

/// The covariant coefficients of the Najafi family in closed form.
pub fn najafi_covariant(k: f64, c: f64, p: &ChartPoint) -> Array1<f64> {
    let (u, r, s) = polar(p);
    let root = najafi_root(k, c, r, s);
    let num = root + c * s;
    let d = c * c * r * r - k * k;
    let cy = 0.5 * u * c * num * num / (d * d * root);
    let cx = -0.5 * num.powi(3) * c * c * u * u / (d.powi(3) * root);
    Array1::from_shape_fn(p.dimension(), |i| cy * p.y[i] + cx * p.x[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::evaluate_at;
    use crate::geometry::{covariant_coefficients, metric_tensor, s_scalar_candidate, spray_coefficients};

    fn pt(x: &[f64], y: &[f64]) -> ChartPoint {
        ChartPoint::new(x.to_vec(), y.to_vec()).unwrap()
    }

    #[test]
    fn najafi_profile_values() {
        let phi = najafi_phi(1.0, 0.3);
        assert_eq!(evaluate_at(&phi, &[0.0], &[0.0]).unwrap(), 1.0);
        let v = evaluate_at(&phi, &[0.5], &[0.1]).unwrap();
        assert!((v - 1.0425995309567867).abs() < 1e-15, "{v}");
        let flat = najafi_phi(2.0, 0.0);
        assert_eq!(evaluate_at(&flat, &[0.4], &[0.3]).unwrap(), 0.5);
    }

    #[test]
    fn najafi_sigma_at_origin() {
        let sm = SphericalMetric::new(najafi_phi(1.0, 0.3), 2, 1.0).unwrap();
        let j = sm.phi_jet(0.0, 0.0).unwrap();
        assert_eq!((j.phi, j.phi_s), (1.0, 0.3));
        assert!((j.phi_ss - 0.09).abs() < 1e-15);
        let sg = sigma(&j);
        assert_eq!(sg.s0, 1.0);
        assert!((sg.s1 - 0.18).abs() < 1e-15);
        assert!((sg.s2 - 0.3).abs() < 1e-15);
        assert_eq!(sg.s3, 0.0);
    }

    #[test]
    fn euclidean_profile_is_trivial() {
        let sm = SphericalMetric::new(Expr::num(1.0), 3, 1.0).unwrap();
        let j = sm.phi_jet(0.4, 0.1).unwrap();
        assert_eq!(
            sigma(&j),
            SigmaSet {
                s0: 1.0,
                s1: 0.0,
                s2: 0.0,
                s3: 0.0
            }
        );
        assert_eq!(pq(&j).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn origin_is_excluded() {
        let sm = SphericalMetric::new(najafi_phi(1.0, 0.3), 2, 1.0).unwrap();
        let j = sm.phi_jet(0.0, 0.0).unwrap();
        assert!(matches!(pq(&j), Err(Error::Spherical(_))));
    }

    #[test]
    fn pq_has_finite_limit_at_origin() {
        let sm = SphericalMetric::new(najafi_phi(1.0, 0.3), 2, 1.0).unwrap();
        let values: Vec<(f64, f64)> = (1..=5)
            .map(|e| {
                let r = 10f64.powi(-e);
                pq(&sm.phi_jet(r, 0.5 * r).unwrap()).unwrap()
            })
            .collect();
        for w in values.windows(2) {
            assert!((w[0].0 - w[1].0).abs() < 0.1 && (w[0].1 - w[1].1).abs() < 0.1);
        }
        let last = values[4];
        assert!((values[3].0 - last.0).abs() < 1e-3 && (values[3].1 - last.1).abs() < 1e-3);
    }

    #[test]
    fn closed_forms_match_pipeline_on_najafi() {
        let sm = SphericalMetric::new(najafi_phi(1.0, 0.3), 2, 1.0).unwrap();
        let m = sm.metric("najafi").unwrap();
        let p = pt(&[0.3, -0.2], &[0.7, 1.1]);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(u, v)| (u - v).abs() < 1e-10 * u.abs().max(1.0));
        let g = metric_tensor(&m, &p).unwrap();
        assert!(close(
            g.as_slice().unwrap(),
            sm.metric_tensor(&p).unwrap().as_slice().unwrap()
        ));
        let spray = spray_coefficients(&m, &p).unwrap();
        assert!(close(
            spray.as_slice().unwrap(),
            sm.spray(&p).unwrap().as_slice().unwrap()
        ));
        let h = covariant_coefficients(&m, &p).unwrap();
        assert!(close(
            h.as_slice().unwrap(),
            sm.covariant(&p).unwrap().as_slice().unwrap()
        ));
        assert!(close(
            h.as_slice().unwrap(),
            najafi_covariant(1.0, 0.3, &p).as_slice().unwrap()
        ));
        let cand = s_scalar_candidate(&m, &p).unwrap();
        assert!((cand - najafi_s_scalar(1.0, 0.3, &p)).abs() < 1e-12);
    }

    #[test]
    fn najafi_s_scalar_spot_value() {
        let p = pt(&[0.0, 0.0], &[1.0, 0.0]);
        assert!((najafi_s_scalar(1.0, 0.3, &p) - 0.05).abs() < 1e-15);
        assert_eq!(najafi_s_scalar(1.0, 0.0, &p), 0.0);
    }

    #[test]
    fn explicit_najafi_text_agrees_with_profile() {
        use crate::expr::parse_with;
        use crate::expr::ParseOptions;
        let text = najafi_metric_text(3);
        let e = parse_with(&text, &ParseOptions::new(3).with_params(["k", "c"])).unwrap();
        let params = [("k".to_string(), 1.0), ("c".to_string(), 0.3)].into_iter().collect();
        let e = e.bind_params(&params);
        let sm = SphericalMetric::new(najafi_phi(1.0, 0.3), 3, 1.0).unwrap();
        let m = sm.metric("n").unwrap();
        let p = pt(&[0.2, -0.1, 0.4], &[0.5, 1.5, -0.3]);
        let a = evaluate_at(&e, &p.x, &p.y).unwrap();
        assert!((a - m.value(&p).unwrap()).abs() < 1e-14);
    }
}
