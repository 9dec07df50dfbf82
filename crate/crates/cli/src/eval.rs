//! Single-point evaluation of pipeline quantities.

use clap::ValueEnum;
use finsler_core::classify::Sig17;
use finsler_core::geometry::{
    covariant_coefficients, h_ladder, metric_tensor, s_scalar_candidate, spray_coefficients, ChartPoint, FinslerMetric,
};
use finsler_core::spherical::{polar, pq, sigma, SphericalMetric};
use finsler_core::{Error, Result};
use serde_json::{json, Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Quantity {
    #[value(name = "F")]
    F,
    #[value(name = "g")]
    Metric,
    #[value(name = "G")]
    Spray,
    #[value(name = "H")]
    Covariant,
    #[value(name = "H_ladder")]
    HLadder,
    /// `y^i H_ijkh`.
    #[value(name = "L")]
    Landsberg,
    #[value(name = "sigma")]
    Sigma,
    #[value(name = "PQ", alias = "P/Q")]
    Pq,
    #[value(name = "s_scalar")]
    SScalar,
}

impl Quantity {
    pub fn label(self) -> &'static str {
        match self {
            Quantity::F => "F",
            Quantity::Metric => "g",
            Quantity::Spray => "G",
            Quantity::Covariant => "H",
            Quantity::HLadder => "H_ladder",
            Quantity::Landsberg => "L",
            Quantity::Sigma => "sigma",
            Quantity::Pq => "PQ",
            Quantity::SScalar => "s_scalar",
        }
    }
}

pub fn number(v: f64) -> Value {
    serde_json::to_value(Sig17(v)).unwrap_or(Value::Null)
}

fn tensor<'a>(values: impl IntoIterator<Item = &'a f64>, shape: &[usize]) -> Value {
    let flat: Vec<f64> = values.into_iter().copied().collect();
    nest(&flat, shape)
}

fn nest(flat: &[f64], shape: &[usize]) -> Value {
    match shape {
        [] => number(flat[0]),
        [_] => Value::Array(flat.iter().map(|v| number(*v)).collect()),
        [n, rest @ ..] => {
            let stride = flat.len() / n;
            Value::Array(flat.chunks(stride).map(|c| nest(c, rest)).collect())
        }
    }
}

/// Evaluates `q` at `p`. Profile quantities need `spherical`.
pub fn evaluate(
    metric: &FinslerMetric,
    spherical: Option<&SphericalMetric>,
    p: &ChartPoint,
    q: Quantity,
) -> Result<Value> {
    metric.check_point(p)?;
    Ok(match q {
        Quantity::F => number(metric.value(p)?),
        Quantity::Metric => {
            let g = metric_tensor(metric, p)?;
            tensor(g.iter(), g.shape())
        }
        Quantity::Spray => tensor(spray_coefficients(metric, p)?.iter(), &[metric.dimension]),
        Quantity::Covariant => tensor(covariant_coefficients(metric, p)?.iter(), &[metric.dimension]),
        Quantity::HLadder => {
            let h = h_ladder(metric, p)?;
            let mut m = Map::new();
            m.insert("H_ij".into(), tensor(h.h2.iter(), h.h2.shape()));
            m.insert("H_ijk".into(), tensor(h.h3.iter(), h.h3.shape()));
            m.insert("H_ijkh".into(), tensor(h.h4.iter(), h.h4.shape()));
            m.insert("L_jkh".into(), tensor(h.landsberg.iter(), h.landsberg.shape()));
            Value::Object(m)
        }
        Quantity::Landsberg => {
            let h = h_ladder(metric, p)?;
            tensor(h.landsberg.iter(), h.landsberg.shape())
        }
        Quantity::Sigma | Quantity::Pq => {
            let sm = spherical
                .ok_or_else(|| Error::Spherical(format!("{} needs a spherically symmetric metric", q.label())))?;
            let (_, r, s) = polar(p);
            let jet = sm.phi_jet(r, s)?;
            if q == Quantity::Sigma {
                let sg = sigma(&jet);
                json!({ "sigma0": number(sg.s0), "sigma1": number(sg.s1), "sigma2": number(sg.s2), "sigma3": number(sg.s3) })
            } else {
                let (pp, qq) = pq(&jet)?;
                json!({ "P": number(pp), "Q": number(qq) })
            }
        }
        Quantity::SScalar => number(s_scalar_candidate(metric, p)?),
    })
}

/// Renders a value for the terminal, one named block per line.
pub fn human(label: &str, v: &Value) -> String {
    match v {
        Value::Object(m) => m.iter().map(|(k, v)| human(k, v)).collect::<Vec<_>>().join("\n"),
        _ => format!("{label} = {v}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nests_row_major() {
        let v = tensor([1.0, 2.0, 3.0, 4.0, 5.0, 6.0].iter(), &[2, 3]);
        assert_eq!(v.to_string(), "[[1.0000000000000000e+0,2.0000000000000000e+0,3.0000000000000000e+0],[4.0000000000000000e+0,5.0000000000000000e+0,6.0000000000000000e+0]]");
    }

    #[test]
    fn scalar_keeps_seventeen_digits() {
        assert_eq!(number(0.1).to_string(), "1.0000000000000001e-1");
        assert_eq!(number(f64::NAN), Value::Null);
    }
}
