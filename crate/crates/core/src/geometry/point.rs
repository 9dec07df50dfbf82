use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3, Array4, Array5};

use crate::error::{Error, Result};
use crate::jets::Jet;
use crate::linalg::{condition_number, inverse, solve};

use super::table::{multisets, DerivativeTable};
use super::{ChartPoint, FinslerMetric, MAX_CONDITION};

/// `d^J H_i` from the table, with `H_i = 1/4 (y^r d_r dot_i F^2 - d_i F^2)`.
///
/// Differentiating the `y^r` factor contributes one term per element of `J`.
pub(crate) fn h_deriv(t: &DerivativeTable, y: &[f64], i: usize, j: &[usize]) -> f64 {
    let mut ij = Vec::with_capacity(j.len() + 1);
    ij.push(i);
    ij.extend_from_slice(j);
    let transport: f64 = (0..y.len()).map(|r| y[r] * t.mixed(r, &ij)).sum();
    let mut hits = 0.0;
    let mut rest = Vec::with_capacity(j.len());
    for m in 0..j.len() {
        rest.clear();
        rest.push(i);
        rest.extend(j.iter().enumerate().filter(|(q, _)| *q != m).map(|(_, v)| *v));
        hits += t.mixed(j[m], &rest);
    }
    0.25 * (transport + hits - t.mixed(i, j))
}

/// Largest single term entering [`h_deriv`].
pub(crate) fn h_deriv_scale(t: &DerivativeTable, y: &[f64], i: usize, j: &[usize]) -> f64 {
    let mut ij = vec![i];
    ij.extend_from_slice(j);
    let mut scale = t.mixed(i, j).abs();
    for r in 0..y.len() {
        scale = scale.max((y[r] * t.mixed(r, &ij)).abs());
    }
    for m in 0..j.len() {
        let mut rest = vec![i];
        rest.extend(j.iter().enumerate().filter(|(q, _)| *q != m).map(|(_, v)| *v));
        scale = scale.max(t.mixed(j[m], &rest).abs());
    }
    0.25 * scale
}

/// `d^S (y^r d_r F^2)`.
fn transport_deriv(t: &DerivativeTable, y: &[f64], s: &[usize]) -> f64 {
    let direct: f64 = (0..y.len()).map(|r| y[r] * t.mixed(r, s)).sum();
    let mut rest = Vec::with_capacity(s.len());
    let mut hits = 0.0;
    for m in 0..s.len() {
        rest.clear();
        rest.extend(s.iter().enumerate().filter(|(q, _)| *q != m).map(|(_, v)| *v));
        hits += t.mixed(s[m], &rest);
    }
    direct + hits
}

/// Jet over the tags of the sorted multiset `m` whose coefficient at each
/// tag subset is `f(sub-multiset)`.
fn outer_jet(m: &[usize], f: impl Fn(&[usize]) -> f64) -> Jet {
    let k = m.len();
    let mut coeffs = [0.0; 64];
    let mut sub = Vec::with_capacity(k);
    for (mask, c) in coeffs.iter_mut().enumerate().take(1 << k) {
        sub.clear();
        sub.extend((0..k).filter(|t| mask & (1 << t) != 0).map(|t| m[t]));
        *c = f(&sub);
    }
    Jet::from_coeffs(k, &coeffs)
}

fn sub_multiset(m: &[usize], mask: usize) -> Vec<usize> {
    (0..m.len()).filter(|t| mask & (1 << t) != 0).map(|t| m[t]).collect()
}

fn sorted(idx: &[usize]) -> Vec<usize> {
    let mut v = idx.to_vec();
    v.sort_unstable();
    v
}

/// Fiber derivatives `d^S G^i` for every multiset `|S| <= order`, from jet
/// Gaussian elimination on `g_ab G^b = H_a`.
fn spray_derivatives(t: &DerivativeTable, y: &[f64], order: usize) -> Result<HashMap<Vec<usize>, Vec<f64>>> {
    let n = y.len();
    let mut out = HashMap::new();
    for m in multisets(n, order) {
        let g: Vec<Vec<Jet>> = (0..n)
            .map(|a| {
                (0..n)
                    .map(|b| {
                        outer_jet(&m, |s| {
                            let mut idx = vec![a, b];
                            idx.extend_from_slice(s);
                            0.5 * t.fiber(&idx)
                        })
                    })
                    .collect()
            })
            .collect();
        let h: Vec<Jet> = (0..n).map(|a| outer_jet(&m, |s| h_deriv(t, y, a, s))).collect();
        let spray = solve(g, h).ok_or_else(|| Error::Degenerate("metric tensor is singular".into()))?;
        for mask in 0..(1usize << m.len()) {
            let key = sub_multiset(&m, mask);
            out.entry(key)
                .or_insert_with(|| spray.iter().map(|j| j.coeff(mask)).collect());
        }
    }
    Ok(out)
}

/// `d^S P` for `|S| <= order`, with `P = y^r d_r F^2 / (4 F^2)`.
fn projective_derivatives(t: &DerivativeTable, y: &[f64], order: usize) -> HashMap<Vec<usize>, f64> {
    let mut out = HashMap::new();
    for m in multisets(y.len(), order) {
        let q = outer_jet(&m, |s| transport_deriv(t, y, s));
        let f2 = outer_jet(&m, |s| t.fiber(s));
        let p = (q * f2.reciprocal()).scale(0.25);
        for mask in 0..(1usize << m.len()) {
            out.entry(sub_multiset(&m, mask)).or_insert(p.coeff(mask));
        }
    }
    out
}

fn check_metric(g: &Array2<f64>) -> Result<Array2<f64>> {
    let inv = inverse(g).ok_or_else(|| Error::Degenerate("not a Finsler point: g is singular".into()))?;
    let cond = condition_number(g, Some(&inv));
    if !(cond <= MAX_CONDITION) {
        return Err(Error::Degenerate(format!(
            "not a Finsler point: condition number of g is {cond:e} (limit {MAX_CONDITION:e})"
        )));
    }
    Ok(inv)
}

/// Every tensor of the pipeline at one site.
#[derive(Debug, Clone)]
pub struct PointGeometry {
    pub point: ChartPoint,
    pub f: f64,
    pub e: f64,
    /// `l_i = dot_i F`.
    pub l: Array1<f64>,
    pub g: Array2<f64>,
    pub g_inv: Array2<f64>,
    pub y_flat_g: Array1<f64>,
    pub y_flat_delta: Array1<f64>,
    pub c3: Array3<f64>,
    pub c4: Array4<f64>,
    pub c5: Array5<f64>,
    /// Spray coefficients `G^i`.
    pub spray: Array1<f64>,
    /// `N^i_j`, indexed `[i][j]`.
    pub nonlinear: Array2<f64>,
    /// Berwald connection `G^i_jk`, indexed `[i][j][k]`.
    pub berwald: Array3<f64>,
    /// `G^i_jkh`, indexed `[i][j][k][h]`.
    pub berwald_curvature: Array4<f64>,
    pub h: Array1<f64>,
    pub h2: Array2<f64>,
    pub h3: Array3<f64>,
    pub h4: Array4<f64>,
    /// `H^i_jk = g^ri H_rjk`, indexed `[i][j][k]`.
    pub h_up: Array3<f64>,
    /// `L_jkh = y^i H_ijkh`.
    pub h_landsberg: Array3<f64>,
    /// Formal Christoffel symbols of `g(x, y)`, indexed `[i][j][k]`.
    pub gamma: Array3<f64>,
    pub s_candidate: f64,
    pub k_candidate: f64,
    pub p_factor: f64,
    pub p1: Array1<f64>,
    pub p2: Array2<f64>,
    pub p3: Array3<f64>,
    /// `d_h H_ijkh`, only for extended evaluations.
    pub h5: Option<Array5<f64>>,
    pub(crate) table: DerivativeTable,
}

impl PointGeometry {
    pub fn new(metric: &FinslerMetric, p: &ChartPoint) -> Result<Self> {
        Self::build(metric, p, false)
    }

    /// Also tabulates sixth-order mixed partials, enough for `d_h H_ijkh`.
    pub fn extended(metric: &FinslerMetric, p: &ChartPoint) -> Result<Self> {
        Self::build(metric, p, true)
    }

    fn build(metric: &FinslerMetric, p: &ChartPoint, extended: bool) -> Result<Self> {
        metric.check_point(p)?;
        let n = metric.dimension;
        let t = DerivativeTable::build(&metric.f2, p, 5, if extended { 5 } else { 4 })?;
        let y = &p.y;

        let f2 = t.fiber(&[]);
        let f = f2.sqrt();
        let l = Array1::from_shape_fn(n, |i| t.fiber(&[i]) / (2.0 * f));
        let g = Array2::from_shape_fn((n, n), |(i, j)| 0.5 * t.fiber(&[i, j]));
        let g_inv = check_metric(&g)?;
        let yv = Array1::from_vec(y.clone());
        let y_flat_g = g.dot(&yv);

        let c3 = Array3::from_shape_fn((n, n, n), |(i, j, k)| 0.25 * t.fiber(&[i, j, k]));
        let c4 = Array4::from_shape_fn((n, n, n, n), |(i, j, k, h)| 0.25 * t.fiber(&[i, j, k, h]));
        let c5 = Array5::from_shape_fn((n, n, n, n, n), |(i, j, k, h, r)| 0.25 * t.fiber(&[i, j, k, h, r]));

        let ds = spray_derivatives(&t, y, 3)?;
        let gd = |idx: &[usize], i: usize| ds[&sorted(idx)][i];
        let spray = Array1::from_shape_fn(n, |i| gd(&[], i));
        let nonlinear = Array2::from_shape_fn((n, n), |(i, j)| gd(&[j], i));
        let berwald = Array3::from_shape_fn((n, n, n), |(i, j, k)| gd(&[j, k], i));
        let berwald_curvature = Array4::from_shape_fn((n, n, n, n), |(i, j, k, h)| gd(&[j, k, h], i));

        let h = Array1::from_shape_fn(n, |i| h_deriv(&t, y, i, &[]));
        let h2 = Array2::from_shape_fn((n, n), |(i, j)| h_deriv(&t, y, i, &[j]));
        let h3 = Array3::from_shape_fn((n, n, n), |(i, j, k)| h_deriv(&t, y, i, &[j, k]));
        let h4 = Array4::from_shape_fn((n, n, n, n), |(i, j, k, q)| h_deriv(&t, y, i, &[j, k, q]));
        let h5 = extended
            .then(|| Array5::from_shape_fn((n, n, n, n, n), |(i, j, k, q, m)| h_deriv(&t, y, i, &[j, k, q, m])));
        let h_up = Array3::from_shape_fn((n, n, n), |(i, j, k)| {
            (0..n).map(|r| g_inv[[r, i]] * h3[[r, j, k]]).sum()
        });
        let h_landsberg = Array3::from_shape_fn((n, n, n), |(j, k, q)| (0..n).map(|i| y[i] * h4[[i, j, k, q]]).sum());

        // d_j g_kr = 1/2 d_j dot_k dot_r F^2
        let dg = |j: usize, k: usize, r: usize| 0.5 * t.mixed(j, &[k, r]);
        let gamma = Array3::from_shape_fn((n, n, n), |(i, j, k)| {
            0.5 * (0..n)
                .map(|r| g_inv[[i, r]] * (dg(j, k, r) + dg(k, r, j) - dg(r, j, k)))
                .sum::<f64>()
        });

        let s_candidate = (0..n).map(|i| y[i] * t.mixed(i, &[])).sum::<f64>() / 12.0;
        let pd = projective_derivatives(&t, y, 3);
        let pv = |idx: &[usize]| pd[&sorted(idx)];

        Ok(PointGeometry {
            point: p.clone(),
            f,
            e: 0.5 * f2,
            l,
            y_flat_delta: yv,
            g,
            g_inv,
            y_flat_g,
            c3,
            c4,
            c5,
            spray,
            nonlinear,
            berwald,
            berwald_curvature,
            h,
            h2,
            h3,
            h4,
            h_up,
            h_landsberg,
            gamma,
            s_candidate,
            k_candidate: -2.0 * s_candidate,
            p_factor: pv(&[]),
            p1: Array1::from_shape_fn(n, |j| pv(&[j])),
            p2: Array2::from_shape_fn((n, n), |(j, k)| pv(&[j, k])),
            p3: Array3::from_shape_fn((n, n, n), |(j, k, q)| pv(&[j, k, q])),
            h5,
            table: t,
        })
    }

    pub fn dimension(&self) -> usize {
        self.point.dimension()
    }

    pub fn table(&self) -> &DerivativeTable {
        &self.table
    }

    /// `d_r F^2`.
    pub fn dx_f2(&self, r: usize) -> f64 {
        self.table.mixed(r, &[])
    }

    /// `d_r g_ij`.
    pub fn dx_g(&self, r: usize, i: usize, j: usize) -> f64 {
        0.5 * self.table.mixed(r, &[i, j])
    }

    /// `d_r C_ijk`.
    pub fn dx_c3(&self, r: usize, i: usize, j: usize, k: usize) -> f64 {
        0.25 * self.table.mixed(r, &[i, j, k])
    }

    /// `d_r C_ijkh`.
    pub fn dx_c4(&self, r: usize, i: usize, j: usize, k: usize, h: usize) -> f64 {
        0.25 * self.table.mixed(r, &[i, j, k, h])
    }

    /// `C^i_jk = g^ir C_rjk`.
    pub fn c_up(&self, i: usize, j: usize, k: usize) -> f64 {
        (0..self.dimension())
            .map(|r| self.g_inv[[i, r]] * self.c3[[r, j, k]])
            .sum()
    }
}

/// Light evaluation of `g`, `H_i` and `G^i` from second-order data only.
struct Basic {
    g: Array2<f64>,
    h: Array1<f64>,
    spray: Array1<f64>,
}

fn basic(metric: &FinslerMetric, p: &ChartPoint) -> Result<Basic> {
    metric.check_point(p)?;
    let n = metric.dimension;
    let t = DerivativeTable::build(&metric.f2, p, 2, 1)?;
    let g = Array2::from_shape_fn((n, n), |(i, j)| 0.5 * t.fiber(&[i, j]));
    let g_inv = check_metric(&g)?;
    let h = Array1::from_shape_fn(n, |i| h_deriv(&t, &p.y, i, &[]));
    let spray = g_inv.dot(&h);
    Ok(Basic { g, h, spray })
}

/// `g_ij = 1/2 dot_i dot_j F^2`; errors when `g` is degenerate.
pub fn metric_tensor(metric: &FinslerMetric, p: &ChartPoint) -> Result<Array2<f64>> {
    Ok(basic(metric, p)?.g)
}

pub fn spray_coefficients(metric: &FinslerMetric, p: &ChartPoint) -> Result<Array1<f64>> {
    Ok(basic(metric, p)?.spray)
}

pub fn covariant_coefficients(metric: &FinslerMetric, p: &ChartPoint) -> Result<Array1<f64>> {
    Ok(basic(metric, p)?.h)
}

#[derive(Debug, Clone)]
pub struct HLadder {
    pub h2: Array2<f64>,
    pub h3: Array3<f64>,
    pub h4: Array4<f64>,
    pub landsberg: Array3<f64>,
}

pub fn h_ladder(metric: &FinslerMetric, p: &ChartPoint) -> Result<HLadder> {
    let pg = PointGeometry::new(metric, p)?;
    Ok(HLadder {
        h2: pg.h2,
        h3: pg.h3,
        h4: pg.h4,
        landsberg: pg.h_landsberg,
    })
}

#[derive(Debug, Clone)]
pub struct CartanLadder {
    pub c3: Array3<f64>,
    pub c4: Array4<f64>,
    pub c5: Array5<f64>,
}

pub fn cartan_ladder(metric: &FinslerMetric, p: &ChartPoint) -> Result<CartanLadder> {
    let pg = PointGeometry::new(metric, p)?;
    Ok(CartanLadder {
        c3: pg.c3,
        c4: pg.c4,
        c5: pg.c5,
    })
}

#[derive(Debug, Clone)]
pub struct Connections {
    pub nonlinear: Array2<f64>,
    pub berwald: Array3<f64>,
    pub berwald_curvature: Array4<f64>,
    pub gamma: Array3<f64>,
    pub h_up: Array3<f64>,
}

pub fn connections(metric: &FinslerMetric, p: &ChartPoint) -> Result<Connections> {
    let pg = PointGeometry::new(metric, p)?;
    Ok(Connections {
        nonlinear: pg.nonlinear,
        berwald: pg.berwald,
        berwald_curvature: pg.berwald_curvature,
        gamma: pg.gamma,
        h_up: pg.h_up,
    })
}

/// `(1/12) y^i d_i F^2`.
pub fn s_scalar_candidate(metric: &FinslerMetric, p: &ChartPoint) -> Result<f64> {
    metric.check_point(p)?;
    let t = DerivativeTable::build(&metric.f2, p, 0, 0)?;
    Ok((0..metric.dimension).map(|i| p.y[i] * t.mixed(i, &[])).sum::<f64>() / 12.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_metric;

    fn metric(text: &str, n: usize) -> FinslerMetric {
        FinslerMetric::new("t", parse_metric(text, n).unwrap(), n).unwrap()
    }

    fn pt(x: &[f64], y: &[f64]) -> ChartPoint {
        ChartPoint::new(x.to_vec(), y.to_vec()).unwrap()
    }

    const EX37: &str = "sqrt(sqrt(y1^4+y2^4+y3^4)+x4*y4^2)";
    const EX51: &str = "sqrt(y1^2+y2^2) + x1*y1 + x2*y2";

    #[test]
    fn euclidean_is_flat() {
        let m = metric("sqrt(y1^2+y2^2)", 2);
        let p = pt(&[0.3, -0.2], &[1.0, 2.0]);
        assert_eq!(metric_tensor(&m, &p).unwrap(), Array2::<f64>::eye(2));
        let pg = PointGeometry::new(&m, &p).unwrap();
        assert!(pg.spray.iter().chain(pg.h.iter()).all(|v| *v == 0.0));
        assert!(pg.h4.iter().chain(pg.gamma.iter()).all(|v| *v == 0.0));
        assert_eq!(pg.s_candidate, 0.0);
    }

    #[test]
    fn quartic_root_values() {
        let m = metric(EX37, 4);
        let p = pt(&[0.0, 0.0, 0.0, 1.0], &[1.0, 1.0, 1.0, 2.0]);
        let g = metric_tensor(&m, &p).unwrap();
        assert_eq!(g[[3, 3]], 1.0);
        let spray = spray_coefficients(&m, &p).unwrap();
        let h = covariant_coefficients(&m, &p).unwrap();
        assert!((spray[3] - 1.0).abs() < 1e-15 && (h[3] - 1.0).abs() < 1e-15);
        assert!(spray.iter().take(3).chain(h.iter().take(3)).all(|v| v.abs() < 1e-15));
        assert!((s_scalar_candidate(&m, &p).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // N^4_4 = dot_4 (y4^2 / (4 x4)) = y4 / (2 x4)
        let c = connections(&m, &p).unwrap();
        assert!((c.nonlinear[[3, 3]] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn randers_closed_forms() {
        let m = metric(EX51, 2);
        let p = pt(&[0.0, 0.0], &[3.0, 4.0]);
        let h = covariant_coefficients(&m, &p).unwrap();
        assert!((h[0] - 7.5).abs() < 1e-13 && (h[1] - 10.0).abs() < 1e-13);
        let pg = PointGeometry::new(&m, &p).unwrap();
        assert!((pg.p_factor - 2.5).abs() < 1e-14);
        // with a = 0 the one-form <x, y> vanishes at x = 0, so F is Euclidean to all fiber orders there
        assert!(pg.c3.iter().all(|v| v.abs() < 1e-15));
        let shifted = metric("sqrt(y1^2+y2^2) + (0.1 + x1)*y1 + (0.1 + x2)*y2", 2);
        let pg = PointGeometry::new(&shifted, &p).unwrap();
        assert!(pg.c3.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn g_contracts_to_f_squared() {
        let m = metric(EX51, 2);
        let p = pt(&[0.1, -0.2], &[0.7, 1.9]);
        let pg = PointGeometry::new(&m, &p).unwrap();
        let q = pg.y_flat_g.dot(&pg.y_flat_delta);
        assert!((q - pg.f * pg.f).abs() < 1e-12);
    }

    #[test]
    fn degenerate_metric_is_reported() {
        let m = metric("sqrt(y1^2)", 2);
        let p = pt(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(matches!(metric_tensor(&m, &p), Err(Error::Degenerate(_))));
    }

    #[test]
    fn extended_evaluation_carries_h5() {
        let m = metric(EX51, 2);
        let p = pt(&[0.1, 0.0], &[1.0, 0.5]);
        let pg = PointGeometry::extended(&m, &p).unwrap();
        let h5 = pg.h5.as_ref().unwrap();
        assert_eq!(h5.shape(), &[2, 2, 2, 2, 2]);
        assert!(PointGeometry::new(&m, &p).unwrap().h5.is_none());
    }
}
