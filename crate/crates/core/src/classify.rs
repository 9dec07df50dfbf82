//! Metric-level verdicts from pointwise residuals.
//!
//! Every predicate is a pointwise equality tested at seeded sites. A
//! verdict holds when the scaled residual stays below the tolerance at
//! every site, so a holding verdict is numeric evidence rather than proof.

use std::fmt;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expr::{CoordinateChange, MetricDefinition};
use crate::geometry::{
    covariant_coefficients, cyclic, h_deriv_scale, indices, metric_tensor, spray_coefficients, sum, ChartPoint,
    FinslerMetric, PointGeometry, Sum,
};
use crate::library::{sample_sites, LibraryEntry, Region};
use crate::linalg::inverse;

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_SITES: usize = 50;
pub const DEFAULT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Fails,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Holds => "holds",
            Verdict::Fails => "fails",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// Serializes a real with 17 significant digits; non-finite values become null.
pub(crate) fn sig17<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if !v.is_finite() {
        return s.serialize_none();
    }
    let text = format!("{v:.16e}");
    let n: serde_json::Number = text.parse().map_err(serde::ser::Error::custom)?;
    n.serialize(s)
}

fn sig17_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        seq.serialize_element(&Sig17(*x))?;
    }
    seq.end()
}

/// A real that serializes with 17 significant digits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sig17(pub f64);

impl Serialize for Sig17 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        sig17(&self.0, s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    #[serde(serialize_with = "sig17_vec")]
    pub x: Vec<f64>,
    #[serde(serialize_with = "sig17_vec")]
    pub y: Vec<f64>,
}

impl From<&ChartPoint> for Witness {
    fn from(p: &ChartPoint) -> Self {
        Witness {
            x: p.x.clone(),
            y: p.y.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredicateVerdict {
    pub name: String,
    pub verdict: Verdict,
    #[serde(serialize_with = "sig17")]
    pub max_residual: f64,
    pub witness: Option<Witness>,
    pub sites: usize,
    #[serde(serialize_with = "sig17")]
    pub tolerance: f64,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredicateVerdict {
    /// Aggregates per-site residuals; the witness is the worst site.
    pub fn from_residuals(name: &str, sites: &[ChartPoint], residuals: &[f64], tolerance: f64) -> Self {
        let mut worst = 0.0f64;
        let mut at = None;
        for (i, &r) in residuals.iter().enumerate() {
            let r = if r.is_nan() { f64::INFINITY } else { r };
            if at.is_none() || r > worst {
                worst = r;
                at = Some(i);
            }
        }
        let verdict = if residuals.is_empty() {
            Verdict::Inconclusive
        } else if worst < tolerance {
            Verdict::Holds
        } else {
            Verdict::Fails
        };
        PredicateVerdict {
            name: name.to_string(),
            verdict,
            max_residual: worst,
            witness: (verdict == Verdict::Fails).then(|| Witness::from(&sites[at.unwrap()])),
            sites: residuals.len(),
            tolerance,
            label: label(residuals.len(), tolerance),
            provenance: None,
            error: None,
        }
    }

    pub fn inconclusive(name: &str, tolerance: f64, error: String) -> Self {
        PredicateVerdict {
            name: name.to_string(),
            verdict: Verdict::Inconclusive,
            max_residual: f64::NAN,
            witness: None,
            sites: 0,
            tolerance,
            label: label(0, tolerance),
            provenance: None,
            error: Some(error),
        }
    }
}

fn label(sites: usize, tolerance: f64) -> String {
    format!("numeric, {sites} sites, tol {tolerance:e}")
}

/// Predicates in report order.
pub const PREDICATES: [&str; 10] = [
    "berwald",
    "condition_i",
    "condition_ii",
    "condition_ii_factor_two",
    "dually_flat",
    "h_berwald",
    "h_landsberg",
    "landsberg",
    "projectively_flat",
    "s_scalar_exists",
];

const LANDSBERG_PROVENANCE: &str = "classical Landsberg tensor -1/2 y_i G^i_jkh with y_i = g_ij y^j";

fn zero_residual(s: Sum) -> f64 {
    s.value.abs() / s.scale.max(1.0)
}

fn max_of(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, f64::max)
}

/// `D_i = y^k d_k dot_i F^2 - 2 d_i F^2`, scaled.
pub fn dually_flat_residual(pg: &PointGeometry) -> Vec<f64> {
    let t = &pg.table;
    let y = &pg.point.y;
    (0..pg.dimension())
        .map(|i| {
            let lhs = sum((0..y.len()).map(|k| y[k] * t.mixed(k, &[i])));
            crate::geometry::scaled(lhs, Sum::of(2.0 * t.mixed(i, &[])))
        })
        .collect()
}

/// `dot_i H_candidate - H_i`, scaled.
fn s_scalar_residual(pg: &PointGeometry) -> f64 {
    let t = &pg.table;
    let y = &pg.point.y;
    max_of((0..pg.dimension()).map(|i| {
        let transport: Vec<f64> = (0..y.len()).map(|k| y[k] * t.mixed(k, &[i])).collect();
        let di = t.mixed(i, &[]);
        let lhs = sum(transport.iter().map(|v| v / 12.0)).add(di / 12.0);
        let rhs = sum(transport.iter().map(|v| v / 4.0)).add(-di / 4.0);
        crate::geometry::scaled(lhs, rhs)
    }))
}

/// `y^k d_k dot_i F - d_i F`, scaled.
pub fn projective_residual(pg: &PointGeometry) -> Vec<f64> {
    let t = &pg.table;
    let y = &pg.point.y;
    let f = pg.f;
    (0..pg.dimension())
        .map(|i| {
            let mut lhs = Sum::default();
            for k in 0..y.len() {
                lhs = lhs
                    .add(y[k] * t.mixed(k, &[i]) / (2.0 * f))
                    .add(-y[k] * t.fiber(&[i]) * t.mixed(k, &[]) / (4.0 * f * f * f));
            }
            crate::geometry::scaled(lhs, Sum::of(t.mixed(i, &[]) / (2.0 * f)))
        })
        .collect()
}

/// Scale of `G^i_jkh` from `H_r = g_rs G^s` differentiated three times.
fn berwald_scale(pg: &PointGeometry, i: usize, j: usize, k: usize, h: usize) -> f64 {
    let n = pg.dimension();
    let y = &pg.point.y;
    let mut scale = 0.0f64;
    for r in 0..n {
        let mut m = h_deriv_scale(&pg.table, y, r, &[j, k, h]);
        for s in 0..n {
            for (a, b, c) in [(j, k, h), (k, h, j), (h, j, k)] {
                m = m.max((2.0 * pg.c3[[r, s, a]] * pg.berwald[[s, b, c]]).abs());
                m = m.max((2.0 * pg.c4[[r, s, a, b]] * pg.nonlinear[[s, c]]).abs());
            }
            m = m.max((2.0 * pg.c5[[r, s, j, k, h]] * pg.spray[s]).abs());
        }
        scale = scale.max(pg.g_inv[[i, r]].abs() * m);
    }
    scale
}

fn h_berwald_residual(pg: &PointGeometry) -> f64 {
    let n = pg.dimension();
    max_of(indices(n, 4).into_iter().map(|v| {
        let s = h_deriv_scale(&pg.table, &pg.point.y, v[0], &v[1..]);
        pg.h4[[v[0], v[1], v[2], v[3]]].abs() / s.max(1.0)
    }))
}

fn h_landsberg_residual(pg: &PointGeometry) -> f64 {
    let n = pg.dimension();
    let y = &pg.point.y;
    max_of(indices(n, 3).into_iter().map(|v| {
        let scale = max_of((0..n).map(|i| (y[i] * h_deriv_scale(&pg.table, y, i, &v)).abs()));
        pg.h_landsberg[[v[0], v[1], v[2]]].abs() / scale.max(1.0)
    }))
}

fn berwald_residual(pg: &PointGeometry) -> f64 {
    let n = pg.dimension();
    max_of(indices(n, 4).into_iter().map(|v| {
        let scale = berwald_scale(pg, v[0], v[1], v[2], v[3]);
        pg.berwald_curvature[[v[0], v[1], v[2], v[3]]].abs() / scale.max(1.0)
    }))
}

/// Classical Landsberg tensor `-1/2 y_i G^i_jkh`.
pub fn classical_landsberg(pg: &PointGeometry) -> Array3<f64> {
    let n = pg.dimension();
    Array3::from_shape_fn((n, n, n), |(j, k, h)| {
        -0.5 * (0..n)
            .map(|i| pg.y_flat_g[i] * pg.berwald_curvature[[i, j, k, h]])
            .sum::<f64>()
    })
}

fn landsberg_residual(pg: &PointGeometry) -> f64 {
    let n = pg.dimension();
    let l = classical_landsberg(pg);
    max_of(indices(n, 3).into_iter().map(|v| {
        let scale = max_of((0..n).map(|i| 0.5 * (pg.y_flat_g[i]).abs() * berwald_scale(pg, i, v[0], v[1], v[2])));
        l[[v[0], v[1], v[2]]].abs() / scale.max(1.0)
    }))
}

fn condition_i_residual(pg: &PointGeometry) -> f64 {
    let n = pg.dimension();
    max_of(indices(n, 4).into_iter().map(|v| {
        let (i, j, k, h) = (v[0], v[1], v[2], v[3]);
        let base = sum((0..n).map(|r| pg.c5[[i, r, j, k, h]] * pg.spray[r]));
        let cyc = cyclic(j, k, h, |a, b, c| {
            sum((0..n).flat_map(|r| {
                [
                    pg.c4[[i, r, a, b]] * pg.nonlinear[[r, c]],
                    pg.c3[[i, r, a]] * pg.berwald[[r, b, c]],
                ]
            }))
        });
        zero_residual(crate::geometry::merge(base, cyc))
    }))
}

fn condition_ii_residual(pg: &PointGeometry, first: f64) -> f64 {
    let n = pg.dimension();
    max_of(indices(n, 3).into_iter().map(|v| {
        let (j, k, h) = (v[0], v[1], v[2]);
        let base = sum((0..n).map(|r| first * pg.c4[[r, j, k, h]] * pg.spray[r]));
        let cyc = cyclic(j, k, h, |a, b, c| {
            sum((0..n).map(|r| pg.c3[[r, a, b]] * pg.nonlinear[[r, c]]))
        });
        zero_residual(crate::geometry::merge(base, cyc))
    }))
}

/// `G^i = P y^i` and `H_i = P y_i` (with `y_i = g_ij y^j`), scaled.
fn projective_factor_residual(pg: &PointGeometry) -> f64 {
    let p = pg.p_factor;
    let y = &pg.point.y;
    max_of((0..pg.dimension()).flat_map(|i| {
        [
            crate::geometry::scaled(Sum::of(pg.spray[i]), Sum::of(p * y[i])),
            crate::geometry::scaled(Sum::of(pg.h[i]), Sum::of(p * pg.y_flat_g[i])),
        ]
    }))
}

/// Residual of every predicate at one site, in [`PREDICATES`] order.
#[derive(Debug, Clone)]
struct SiteResult {
    residuals: [f64; PREDICATES.len()],
    projective_audit: f64,
    p_factor: f64,
}

fn site_result(metric: &FinslerMetric, p: &ChartPoint) -> Result<SiteResult> {
    let pg = PointGeometry::new(metric, p)?;
    let residuals = [
        berwald_residual(&pg),
        condition_i_residual(&pg),
        condition_ii_residual(&pg, 1.0),
        condition_ii_residual(&pg, 2.0),
        max_of(dually_flat_residual(&pg)),
        h_berwald_residual(&pg),
        h_landsberg_residual(&pg),
        landsberg_residual(&pg),
        max_of(projective_residual(&pg)),
        s_scalar_residual(&pg),
    ];
    Ok(SiteResult {
        residuals,
        projective_audit: projective_factor_residual(&pg),
        p_factor: pg.p_factor,
    })
}

/// Scaled residual of every predicate at one site, in [`PREDICATES`] order.
pub fn predicate_residuals(metric: &FinslerMetric, p: &ChartPoint) -> Result<Vec<(&'static str, f64)>> {
    let r = site_result(metric, p)?;
    Ok(PREDICATES.iter().copied().zip(r.residuals).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditStatus {
    Consistent,
    Violated,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Audit {
    pub name: &'static str,
    pub status: AuditStatus,
    /// Unenforced audits are reported but never count as violations.
    pub enforced: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompanionComparison {
    pub companion: String,
    #[serde(serialize_with = "sig17")]
    pub spray_max_scaled_difference: f64,
    #[serde(serialize_with = "sig17")]
    pub covariant_min_scaled_difference: f64,
    #[serde(serialize_with = "sig17")]
    pub covariant_max_scaled_difference: f64,
    #[serde(serialize_with = "sig17")]
    pub covariant_max_component_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tolerances {
    #[serde(serialize_with = "sig17")]
    pub predicate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub metric: String,
    pub definition_sha256: String,
    pub dimension: usize,
    pub seed: u64,
    pub sites: usize,
    pub tolerances: Tolerances,
    pub predicates: Vec<PredicateVerdict>,
    pub audits: Vec<Audit>,
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "opt_sig17_vec")]
    pub projective_factor: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub companion: Option<CompanionComparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampling_error: Option<String>,
}

fn opt_sig17_vec<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => sig17_vec(v, s),
        None => s.serialize_none(),
    }
}

impl ClassificationReport {
    pub fn predicate(&self, name: &str) -> Option<&PredicateVerdict> {
        self.predicates.iter().find(|p| p.name == name)
    }

    pub fn verdict(&self, name: &str) -> Option<Verdict> {
        self.predicate(name).map(|p| p.verdict)
    }

    pub fn violated_audits(&self) -> Vec<&Audit> {
        self.audits
            .iter()
            .filter(|a| a.enforced && a.status == AuditStatus::Violated)
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_human(&self) -> String {
        let mut out = format!(
            "metric {} (dimension {}, seed {}, {} sites)\n",
            self.metric, self.dimension, self.seed, self.sites
        );
        if let Some(e) = &self.sampling_error {
            out += &format!("sampling failed: {e}\n");
        }
        out += &format!("{:<26} {:<13} {:>24}\n", "predicate", "verdict", "max scaled residual");
        for p in &self.predicates {
            let mut line = format!(
                "{:<26} {:<13} {:>24.16e}",
                p.name,
                p.verdict.to_string(),
                p.max_residual
            );
            if let Some(e) = &p.error {
                line += &format!("  ({e})");
            }
            out += &line;
            out.push('\n');
        }
        for a in &self.audits {
            let status = match a.status {
                AuditStatus::Consistent => "consistent",
                AuditStatus::Violated => "VIOLATED",
                AuditStatus::NotApplicable => "n/a",
            };
            out += &format!("audit {:<62} {status}\n", a.name);
        }
        if let Some(c) = &self.companion {
            out += &format!(
                "companion {}: spray difference {:.3e}, covariant difference {:.3e} to {:.3e}\n",
                c.companion,
                c.spray_max_scaled_difference,
                c.covariant_min_scaled_difference,
                c.covariant_max_scaled_difference
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ClassifyOptions {
    pub seed: u64,
    pub sites: usize,
    pub tolerance: f64,
    pub region: Option<Region>,
    pub companion: Option<MetricDefinition>,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions {
            seed: DEFAULT_SEED,
            sites: DEFAULT_SITES,
            tolerance: DEFAULT_TOLERANCE,
            region: None,
            companion: None,
        }
    }
}

impl ClassifyOptions {
    pub fn for_entry(entry: &LibraryEntry) -> Result<Self> {
        Ok(ClassifyOptions {
            region: Some(entry.region.clone()),
            companion: entry
                .companion
                .as_ref()
                .map(|t| MetricDefinition::parse(&format!("{}_bar", entry.name), t))
                .transpose()?,
            ..Default::default()
        })
    }
}

pub fn classify_entry(entry: &LibraryEntry, seed: u64, sites: usize, tolerance: f64) -> Result<ClassificationReport> {
    let options = ClassifyOptions {
        seed,
        sites,
        tolerance,
        ..ClassifyOptions::for_entry(entry)?
    };
    classify_metric(&entry.definition()?, &options)
}

fn audit(name: &'static str, enforced: bool, premise: bool, conclusion: bool, detail: &str) -> Audit {
    Audit {
        name,
        status: match (premise, conclusion) {
            (false, _) => AuditStatus::NotApplicable,
            (true, true) => AuditStatus::Consistent,
            (true, false) => AuditStatus::Violated,
        },
        enforced,
        detail: detail.to_string(),
    }
}

/// Samples sites, evaluates every predicate and runs the implication audits.
///
/// Only an unusable definition is an error. Sampling and evaluation failures
/// leave the affected predicates inconclusive.
pub fn classify_metric(def: &MetricDefinition, options: &ClassifyOptions) -> Result<ClassificationReport> {
    if options.sites == 0 || !(options.tolerance > 0.0) {
        return Err(Error::InvalidPoint("site count and tolerance must be positive".into()));
    }
    let metric = FinslerMetric::from_definition(def)?;
    let companion = options
        .companion
        .as_ref()
        .map(FinslerMetric::from_definition)
        .transpose()?;
    let region = options.region.clone().unwrap_or_else(|| Region::default_for(&metric));
    let mut metrics = vec![metric.clone()];
    metrics.extend(companion.clone());
    let tol = options.tolerance;

    let mut report = ClassificationReport {
        metric: def.name.clone(),
        definition_sha256: hex(&Sha256::digest(def.to_file_text().as_bytes())),
        dimension: metric.dimension,
        seed: options.seed,
        sites: options.sites,
        tolerances: Tolerances { predicate: tol },
        predicates: Vec::new(),
        audits: Vec::new(),
        projective_factor: None,
        companion: None,
        sampling_error: None,
    };

    let sites = match sample_sites(&metrics, &region, options.seed, options.sites) {
        Ok(s) => s,
        Err(e) => {
            report.sampling_error = Some(e.to_string());
            report.predicates = PREDICATES
                .iter()
                .map(|name| PredicateVerdict::inconclusive(name, tol, e.to_string()))
                .collect();
            report.audits = audits(&report, f64::NAN);
            return Ok(report);
        }
    };

    let results: Vec<Result<SiteResult>> = sites.par_iter().map(|p| site_result(&metric, p)).collect();
    let first_error = results.iter().find_map(|r| r.as_ref().err().cloned());
    match first_error {
        Some(e) => {
            report.predicates = PREDICATES
                .iter()
                .map(|name| PredicateVerdict::inconclusive(name, tol, e.to_string()))
                .collect();
            report.audits = audits(&report, f64::NAN);
        }
        None => {
            let results: Vec<SiteResult> = results.into_iter().map(|r| r.unwrap()).collect();
            for (k, name) in PREDICATES.iter().enumerate() {
                let residuals: Vec<f64> = results.iter().map(|r| r.residuals[k]).collect();
                let mut v = PredicateVerdict::from_residuals(name, &sites, &residuals, tol);
                if *name == "landsberg" {
                    v.provenance = Some(LANDSBERG_PROVENANCE.to_string());
                }
                report.predicates.push(v);
            }
            let projective_audit = max_of(results.iter().map(|r| r.projective_audit));
            if report.verdict("projectively_flat") == Some(Verdict::Holds) {
                report.projective_factor = Some(results.iter().map(|r| r.p_factor).collect());
            }
            report.audits = audits(&report, projective_audit);
        }
    }

    if let Some(other) = &companion {
        report.companion = Some(compare_companion(&metric, other, &sites)?);
    }
    Ok(report)
}

fn audits(report: &ClassificationReport, projective_audit: f64) -> Vec<Audit> {
    let holds = |n: &str| report.verdict(n) == Some(Verdict::Holds);
    let known = |n: &str| matches!(report.verdict(n), Some(Verdict::Holds | Verdict::Fails));
    let same = |a: &str, b: &str| report.verdict(a) == report.verdict(b);
    vec![
        audit(
            "h_berwald_implies_h_landsberg",
            true,
            holds("h_berwald"),
            holds("h_landsberg"),
            "every H-Berwald metric is H-Landsberg",
        ),
        audit(
            "s_scalar_implies_h_landsberg_and_dually_flat",
            true,
            holds("s_scalar_exists"),
            holds("h_landsberg") && holds("dually_flat"),
            "an S-scalar forces H-Landsberg and dual flatness",
        ),
        audit(
            "s_scalar_equals_dually_flat",
            true,
            known("s_scalar_exists") && known("dually_flat"),
            same("s_scalar_exists", "dually_flat"),
            "the S-scalar exists exactly when the metric is dually flat",
        ),
        audit(
            "condition_i_implies_h_berwald_equals_berwald",
            true,
            holds("condition_i") && known("h_berwald") && known("berwald"),
            same("h_berwald", "berwald"),
            "under the I-condition H_ijkh = g_ir G^r_jkh",
        ),
        audit(
            "condition_ii_factor_two_implies_h_landsberg_equals_landsberg",
            true,
            holds("condition_ii_factor_two") && known("h_landsberg") && known("landsberg"),
            same("h_landsberg", "landsberg"),
            "y^i H_ijkh = -2 L_jkh - 2 (2 C_rjkh G^r + cyclic C_rjk G^r_h)",
        ),
        audit(
            "condition_ii_implies_h_landsberg_equals_landsberg",
            false,
            holds("condition_ii") && known("h_landsberg") && known("landsberg"),
            same("h_landsberg", "landsberg"),
            "II-condition with unit coefficient on C_rjkh G^r; informational",
        ),
        audit(
            "projective_factor_consistency",
            true,
            holds("projectively_flat"),
            projective_audit < report.tolerances.predicate,
            &format!("G^i = P y^i and H_i = P g_ij y^j, max scaled residual {projective_audit:e}"),
        ),
    ]
}

fn compare_companion(a: &FinslerMetric, b: &FinslerMetric, sites: &[ChartPoint]) -> Result<CompanionComparison> {
    let per_site: Vec<Result<(f64, f64, f64)>> = sites
        .par_iter()
        .map(|p| {
            let (ga, gb) = (spray_coefficients(a, p)?, spray_coefficients(b, p)?);
            let (ha, hb) = (covariant_coefficients(a, p)?, covariant_coefficients(b, p)?);
            let rel = |u: f64, v: f64| (u - v).abs() / 1f64.max(u.abs()).max(v.abs());
            let n = ga.len();
            Ok((
                max_of((0..n).map(|i| rel(ga[i], gb[i]))),
                max_of((0..n).map(|i| rel(ha[i], hb[i]))),
                max_of((0..n).map(|i| (ha[i] - hb[i]).abs())),
            ))
        })
        .collect();
    let mut out = CompanionComparison {
        companion: b.name.clone(),
        spray_max_scaled_difference: 0.0,
        covariant_min_scaled_difference: f64::INFINITY,
        covariant_max_scaled_difference: 0.0,
        covariant_max_component_difference: 0.0,
    };
    for r in per_site {
        let (s, h, hc) = r?;
        out.spray_max_scaled_difference = out.spray_max_scaled_difference.max(s);
        out.covariant_min_scaled_difference = out.covariant_min_scaled_difference.min(h);
        out.covariant_max_scaled_difference = out.covariant_max_scaled_difference.max(h);
        out.covariant_max_component_difference = out.covariant_max_component_difference.max(hc);
    }
    Ok(out)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `F` expressed in the chart `x = psi(x~)`.
pub fn transformed_metric(metric: &FinslerMetric, change: &CoordinateChange) -> Result<FinslerMetric> {
    let mut out = FinslerMetric::new(format!("{}~", metric.name), change.apply(&metric.f)?, metric.dimension)?;
    out.domain = metric.domain.as_ref().map(|d| change.apply(d)).transpose()?;
    Ok(out)
}

/// Chart data at a new-chart site: the old-chart site, `J = Dpsi`, its
/// inverse and the second derivatives of `psi`.
struct ChartData {
    old: ChartPoint,
    j: Array2<f64>,
    k: Array2<f64>,
    hess: Vec<Vec<Vec<f64>>>,
}

fn chart_data(change: &CoordinateChange, pt: &ChartPoint) -> Result<ChartData> {
    let (x, y) = change.pull_back(&pt.x, &pt.y)?;
    let jac = change.jacobian_at(&pt.x)?;
    let n = jac.len();
    let j = Array2::from_shape_fn((n, n), |(a, b)| jac[a][b]);
    let k = inverse(&j).ok_or_else(|| Error::SingularJacobian {
        at: pt.x.clone(),
        det: 0.0,
    })?;
    Ok(ChartData {
        old: ChartPoint::new(x, y)?,
        j,
        k,
        hess: change.hessian_at(&pt.x)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformationLaw {
    pub verdict: PredicateVerdict,
    /// Largest `|1/2 g~_ir K^r_c psi^c_bd y~^b y~^d|` over the sites.
    #[serde(serialize_with = "sig17")]
    pub max_second_term: f64,
}

/// Compares `H~_i` computed directly on `F~` with
/// `J^a_i H_a + 1/2 g~_ir K^r_c psi^c_bd y~^b y~^d` at new-chart sites.
pub fn transformation_law_check(
    metric: &FinslerMetric,
    change: &CoordinateChange,
    sites: &[ChartPoint],
    tolerance: f64,
) -> Result<TransformationLaw> {
    let ft = transformed_metric(metric, change)?;
    let per_site: Vec<Result<(f64, f64)>> = sites
        .par_iter()
        .map(|pt| {
            let cd = chart_data(change, pt)?;
            let n = pt.dimension();
            let h = covariant_coefficients(metric, &cd.old)?;
            let ht = covariant_coefficients(&ft, pt)?;
            let gt = metric_tensor(&ft, pt)?;
            let v: Vec<f64> = (0..n)
                .map(|c| {
                    (0..n)
                        .flat_map(|b| (0..n).map(move |d| (b, d)))
                        .map(|(b, d)| cd.hess[c][b][d] * pt.y[b] * pt.y[d])
                        .sum()
                })
                .collect();
            let w: Vec<f64> = (0..n).map(|r| (0..n).map(|c| cd.k[[r, c]] * v[c]).sum()).collect();
            let mut worst = 0.0f64;
            let mut second_max = 0.0f64;
            for i in 0..n {
                let second: Vec<f64> = (0..n).map(|r| 0.5 * gt[[i, r]] * w[r]).collect();
                second_max = second_max.max(second.iter().sum::<f64>().abs());
                let rhs = sum((0..n).map(|a| cd.j[[a, i]] * h[a]).chain(second));
                worst = worst.max(crate::geometry::scaled(Sum::of(ht[i]), rhs));
            }
            Ok((worst, second_max))
        })
        .collect();
    let mut residuals = Vec::with_capacity(sites.len());
    let mut max_second_term = 0.0f64;
    for r in per_site {
        let (res, second) = r?;
        residuals.push(res);
        max_second_term = max_second_term.max(second);
    }
    Ok(TransformationLaw {
        verdict: PredicateVerdict::from_residuals("transformation_law", sites, &residuals, tolerance),
        max_second_term,
    })
}

/// Largest scaled defect between `actual` in the new chart and the
/// linear-connection law applied to `old`.
fn connection_defect(cd: &ChartData, old: &Array3<f64>, actual: &Array3<f64>) -> f64 {
    let n = cd.j.nrows();
    max_of(indices(n, 3).into_iter().map(|v| {
        let (i, j, k) = (v[0], v[1], v[2]);
        let mut predicted = Sum::default();
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    predicted = predicted.add(cd.k[[i, a]] * cd.j[[b, j]] * cd.j[[c, k]] * old[[a, b, c]]);
                }
            }
            predicted = predicted.add(cd.k[[i, a]] * cd.hess[a][j][k]);
        }
        crate::geometry::scaled(Sum::of(actual[[i, j, k]]), predicted)
    }))
}

/// How far `H^i_jk` is from transforming as a linear connection at one
/// new-chart site.
pub fn non_connection_witness(metric: &FinslerMetric, change: &CoordinateChange, site: &ChartPoint) -> Result<f64> {
    let ft = transformed_metric(metric, change)?;
    let cd = chart_data(change, site)?;
    let old = PointGeometry::new(metric, &cd.old)?;
    let new = PointGeometry::new(&ft, site)?;
    Ok(connection_defect(&cd, &old.h_up, &new.h_up))
}

/// Defect of the projective construction `H^i_jk - 2 P C^i_jk`, built in
/// the original chart, against the Berwald connection of `F~`.
pub fn projective_construction_defect(
    metric: &FinslerMetric,
    change: &CoordinateChange,
    site: &ChartPoint,
) -> Result<f64> {
    let ft = transformed_metric(metric, change)?;
    let cd = chart_data(change, site)?;
    let old = PointGeometry::new(metric, &cd.old)?;
    let new = PointGeometry::new(&ft, site)?;
    let n = old.dimension();
    let construction = Array3::from_shape_fn((n, n, n), |(i, j, k)| {
        old.h_up[[i, j, k]] - 2.0 * old.p_factor * old.c_up(i, j, k)
    });
    Ok(connection_defect(&cd, &construction, &new.berwald))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_metric, Expr};
    use crate::library::builtin;

    fn report(name: &str, sites: usize) -> ClassificationReport {
        classify_entry(&builtin(name).unwrap(), 42, sites, DEFAULT_TOLERANCE).unwrap()
    }

    #[test]
    fn euclidean_all_hold() {
        let r = report("euclidean_2d", 10);
        for p in &r.predicates {
            assert_eq!(p.verdict, Verdict::Holds, "{}", p.name);
            assert!(p.witness.is_none());
            assert_eq!(p.label, "numeric, 10 sites, tol 1e-9");
        }
        assert!(r.violated_audits().is_empty());
    }

    #[test]
    fn ex51_dual_flatness_residual_is_nonzero() {
        let m = builtin("ex51").unwrap().metric().unwrap();
        let p = ChartPoint::new(vec![0.2, 0.1], vec![1.0, 2.0]).unwrap();
        let pg = PointGeometry::new(&m, &p).unwrap();
        assert!(max_of(dually_flat_residual(&pg)) > 1e-3);
        assert!(max_of(projective_residual(&pg)) < 1e-12);
        assert!((pg.p_factor - 5.0 / (2.0 * (5f64.sqrt() + 0.4))).abs() < 1e-14);
    }

    #[test]
    fn ex51_report() {
        let r = report("ex51", 12);
        assert_eq!(r.verdict("projectively_flat"), Some(Verdict::Holds));
        assert_eq!(r.verdict("h_landsberg"), Some(Verdict::Holds));
        assert_eq!(r.verdict("h_berwald"), Some(Verdict::Fails));
        assert_eq!(r.verdict("s_scalar_exists"), Some(Verdict::Fails));
        let hb = r.predicate("h_berwald").unwrap();
        assert!(hb.witness.is_some() && hb.max_residual > 1e-3);
        assert_eq!(r.projective_factor.as_ref().unwrap().len(), 12);
        assert!(r.violated_audits().is_empty());
    }

    #[test]
    fn witness_is_worst_site_and_nan_fails() {
        let sites: Vec<ChartPoint> = (1..=3)
            .map(|i| ChartPoint::new(vec![0.0], vec![i as f64]).unwrap())
            .collect();
        let v = PredicateVerdict::from_residuals("t", &sites, &[1e-12, 0.5, 1e-3], 1e-9);
        assert_eq!(v.verdict, Verdict::Fails);
        assert_eq!(v.witness.unwrap().y, vec![2.0]);
        let v = PredicateVerdict::from_residuals("t", &sites, &[1e-12, f64::NAN, 0.0], 1e-9);
        assert_eq!(v.verdict, Verdict::Fails);
        let v = PredicateVerdict::from_residuals("t", &sites, &[], 1e-9);
        assert_eq!(v.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn report_is_deterministic_with_17_digits() {
        let a = report("najafi", 6).to_json();
        let b = report("najafi", 6).to_json();
        assert_eq!(a, b);
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        let residual = v["predicates"][0]["max_residual"].to_string();
        let mantissa = residual.split('e').next().unwrap().replace(['.', '-'], "");
        assert_eq!(mantissa.len(), 17, "{residual}");
    }

    #[test]
    fn sampling_failure_gives_inconclusive_report() {
        let def = MetricDefinition::parse("neg", "dimension = 1\nmetric = \"y1\"\ndomain = \"-1\"\n").unwrap();
        let r = classify_metric(&def, &ClassifyOptions::default()).unwrap();
        assert!(r.sampling_error.is_some());
        assert!(r.predicates.iter().all(|p| p.verdict == Verdict::Inconclusive));
    }

    #[test]
    fn affine_change_has_no_second_term() {
        let m = builtin("ex51").unwrap().metric().unwrap();
        let change = CoordinateChange::affine(&[vec![2.0, 1.0], vec![0.0, 1.0]], &[0.1, 0.0]).unwrap();
        let sites = vec![ChartPoint::new(vec![0.05, 0.1], vec![1.0, -0.5]).unwrap()];
        let law = transformation_law_check(&m, &change, &sites, 1e-8).unwrap();
        assert_eq!(law.max_second_term, 0.0);
        assert_eq!(law.verdict.verdict, Verdict::Holds);
        assert!(non_connection_witness(&m, &change, &sites[0]).unwrap() < 1e-9);
    }

    #[test]
    fn quadratic_change_obeys_transformation_law() {
        let m = builtin("ex51").unwrap().metric().unwrap();
        let psi = (1..=2)
            .map(|i| parse_metric(&format!("x{i} + 0.1*x{i}^2"), 2).unwrap())
            .collect::<Vec<Expr>>();
        let change = CoordinateChange::new(psi, 2).unwrap();
        let sites = vec![
            ChartPoint::new(vec![0.2, -0.1], vec![1.0, 2.0]).unwrap(),
            ChartPoint::new(vec![-0.25, 0.05], vec![-0.3, 0.7]).unwrap(),
        ];
        let law = transformation_law_check(&m, &change, &sites, 1e-8).unwrap();
        assert_eq!(law.verdict.verdict, Verdict::Holds, "{}", law.verdict.max_residual);
        assert!(law.max_second_term > 1e-3);
        assert!(projective_construction_defect(&m, &change, &sites[0]).unwrap() < 1e-8);
    }
}
