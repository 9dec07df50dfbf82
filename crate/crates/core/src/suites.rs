//! Verification suites: identities, library regression, AD against finite
//! differences, spherical closed forms, transformation laws, closed-form
//! oracles and determinism.

use ndarray::Array1;
use rayon::prelude::*;
use serde::Serialize;

use crate::classify::{
    classify_entry, non_connection_witness, projective_construction_defect, sig17, transformation_law_check,
    transformed_metric, Verdict,
};
use crate::error::Result;
use crate::expr::{parse_metric, CoordinateChange, Expr, Var};
use crate::geometry::{
    covariant_coefficients, identity_residuals, metric_tensor, s_scalar_candidate, spray_coefficients, ChartPoint,
    DerivativeTable, FinslerMetric,
};
use crate::jets::{default_fd_steps, fd_partial_with_steps, DerivativeRequest};
use crate::library::{builtin, builtin_names, sample_sites, LibraryEntry, Region};
use crate::spherical::{najafi_phi, najafi_s_scalar, polar, sigma, SphericalMetric};

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Sites per metric for the pointwise suites.
    pub sites: usize,
    /// Sites per metric for classification.
    pub classify_sites: usize,
    pub identity_tol: f64,
    pub fd_tol: f64,
    pub spherical_tol: f64,
    pub transform_tol: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 42,
            sites: 25,
            classify_sites: 50,
            identity_tol: 1e-9,
            fd_tol: 1e-5,
            spherical_tol: 1e-8,
            transform_tol: 1e-8,
        }
    }
}

impl SuiteOptions {
    /// Overrides every pointwise tolerance at once.
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.identity_tol = tol;
        self.fd_tol = tol;
        self.spherical_tol = tol;
        self.transform_tol = tol;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    #[serde(serialize_with = "sig17")]
    pub worst: f64,
    pub checks: usize,
    /// First failing check, if any.
    pub witness: Option<String>,
}

/// Running maximum over named checks that remembers the first failure.
#[derive(Debug)]
pub struct Tally {
    name: &'static str,
    worst: f64,
    checks: usize,
    witness: Option<String>,
}

impl Tally {
    pub fn new(name: &'static str) -> Self {
        Tally {
            name,
            worst: 0.0,
            checks: 0,
            witness: None,
        }
    }

    /// Records a residual that must stay below `tol`.
    pub fn below(&mut self, what: impl FnOnce() -> String, value: f64, tol: f64) {
        self.checks += 1;
        let v = if value.is_nan() { f64::INFINITY } else { value };
        self.worst = self.worst.max(v);
        if !(v < tol) && self.witness.is_none() {
            self.witness = Some(format!("{}: {v:e} (tol {tol:e})", what()));
        }
    }

    /// Records a condition with no residual attached.
    pub fn require(&mut self, what: impl FnOnce() -> String, ok: bool) {
        self.checks += 1;
        if !ok && self.witness.is_none() {
            self.witness = Some(what());
        }
    }

    pub fn error(&mut self, what: impl FnOnce() -> String, e: &crate::Error) {
        self.require(|| format!("{}: {e}", what()), false);
    }

    pub fn finish(self) -> SuiteOutcome {
        SuiteOutcome {
            name: self.name,
            passed: self.witness.is_none(),
            worst: self.worst,
            checks: self.checks,
            witness: self.witness,
        }
    }
}

fn entries() -> Vec<LibraryEntry> {
    builtin_names()
        .into_iter()
        .map(|n| builtin(n).expect("builtin"))
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| rel(*u, *v)).fold(0.0, f64::max)
}

/// Every gating identity at every site of every library metric.
pub fn identity_suite(opts: &SuiteOptions) -> SuiteOutcome {
    let mut tally = Tally::new("identities");
    for entry in entries() {
        let projective = entry.expected.get("projectively_flat") == Some(&Verdict::Holds);
        let metric = entry.metric().expect("builtin metric");
        let sites = match entry.sample(opts.seed, opts.sites) {
            Ok(s) => s,
            Err(e) => {
                tally.error(|| entry.name.to_string(), &e);
                continue;
            }
        };
        let results: Vec<_> = sites
            .par_iter()
            .map(|p| identity_residuals(&metric, p, projective))
            .collect();
        for (p, r) in sites.iter().zip(results) {
            match r {
                Ok(rs) => {
                    for ir in rs.iter().filter(|ir| ir.gates()) {
                        tally.below(
                            || format!("{} {} at {p:?}", entry.name, ir.name),
                            ir.residual,
                            opts.identity_tol,
                        );
                    }
                }
                Err(e) => tally.error(|| format!("{} at {p:?}", entry.name), &e),
            }
        }
    }
    tally.finish()
}

/// Classification of every library entry against its expected flags.
pub fn regression_suite(opts: &SuiteOptions) -> SuiteOutcome {
    let mut tally = Tally::new("regression");
    for entry in entries() {
        let report = match classify_entry(
            &entry,
            opts.seed,
            opts.classify_sites,
            crate::classify::DEFAULT_TOLERANCE,
        ) {
            Ok(r) => r,
            Err(e) => {
                tally.error(|| entry.name.to_string(), &e);
                continue;
            }
        };
        for (pred, want) in &entry.expected {
            let got = report.predicate(pred).expect("known predicate");
            if *want == Verdict::Holds {
                tally.worst = tally.worst.max(got.max_residual);
            }
            tally.require(
                || {
                    format!(
                        "{}.{pred}: expected {want}, got {} ({:e})",
                        entry.name, got.verdict, got.max_residual
                    )
                },
                got.verdict == *want,
            );
        }
        for a in report.violated_audits() {
            tally.require(|| format!("{}: audit {} violated", entry.name, a.name), false);
        }
        if let Some(c) = &report.companion {
            tally.require(
                || format!("{}: sprays differ by {:e}", entry.name, c.spray_max_scaled_difference),
                c.spray_max_scaled_difference < 1e-9,
            );
            tally.require(
                || {
                    format!(
                        "{}: covariant coefficients agree to {:e}",
                        entry.name, c.covariant_max_scaled_difference
                    )
                },
                c.covariant_max_scaled_difference > 1e-3,
            );
        }
    }
    tally.finish()
}

/// Default finite-difference steps, with position steps kept below a tenth
/// of `|x|` for spherically symmetric metrics, whose chart expression is
/// singular at the origin.
pub fn fd_steps(metric: &FinslerMetric, req: &DerivativeRequest) -> Vec<f64> {
    let r = req.point.x.iter().map(|v| v * v).sum::<f64>().sqrt();
    default_fd_steps(req)
        .into_iter()
        .zip(&req.vars)
        .map(|(h, v)| {
            if metric.profile.is_some() && !v.is_fiber() {
                h.min(0.1 * r)
            } else {
                h
            }
        })
        .collect()
}

/// Scaled AD-vs-FD discrepancy for every table entry at one site.
///
/// A derivative of order `k` in `y` of the 2-homogeneous `F^2` has natural
/// size `F^2/|y|^k`; errors are measured against the larger of that, the
/// derivative itself and 1.
pub fn fd_discrepancies(metric: &FinslerMetric, p: &ChartPoint) -> Result<Vec<(String, f64)>> {
    let table = DerivativeTable::build(&metric.f2, p, 5, 4)?;
    let f2 = table.fiber(&[]).abs();
    let ynorm = p.y_norm();
    let mut out = Vec::new();
    for (r, m, ad) in table.entries() {
        let mut vars: Vec<Var> = m.iter().map(|&i| Var::y(i + 1)).collect();
        if let Some(r) = r {
            vars.push(Var::x(r + 1));
        }
        let req = DerivativeRequest::new(p.clone(), vars)?;
        let fd = fd_partial_with_steps(&metric.f2, &req, &fd_steps(metric, &req))?;
        let natural = f2 / ynorm.powi(m.len() as i32);
        let scale = 1f64.max(ad.abs()).max(natural);
        let label = match r {
            Some(r) => format!("d_x{} d_y{:?}", r + 1, m.iter().map(|i| i + 1).collect::<Vec<_>>()),
            None => format!("d_y{:?}", m.iter().map(|i| i + 1).collect::<Vec<_>>()),
        };
        out.push((label, (ad - fd).abs() / scale));
    }
    Ok(out)
}

pub fn fd_suite(opts: &SuiteOptions) -> SuiteOutcome {
    let mut tally = Tally::new("finite_differences");
    for entry in entries() {
        let metrics = entry.metrics().expect("builtin metric");
        let sites = match sample_sites(&metrics, &entry.region, opts.seed, opts.sites) {
            Ok(s) => s,
            Err(e) => {
                tally.error(|| entry.name.to_string(), &e);
                continue;
            }
        };
        for metric in &metrics {
            let results: Vec<_> = sites.par_iter().map(|p| fd_discrepancies(metric, p)).collect();
            for (p, r) in sites.iter().zip(results) {
                match r {
                    Ok(ds) => {
                        for (label, d) in ds {
                            tally.below(|| format!("{} {label} at {p:?}", metric.name), d, opts.fd_tol);
                        }
                    }
                    Err(e) => tally.error(|| format!("{} at {p:?}", metric.name), &e),
                }
            }
        }
    }
    tally.finish()
}

/// The spherically symmetric metrics the closed forms are checked on.
pub fn spherical_cases() -> Vec<(&'static str, SphericalMetric)> {
    let generic = builtin("spherical_generic")
        .and_then(|e| e.metric())
        .expect("generic profile");
    let generic = SphericalMetric::from_metric(&generic, 0.9).expect("profile metric");
    vec![
        ("euclidean", SphericalMetric::new(Expr::num(1.0), 2, 1.0)),
        ("najafi", SphericalMetric::new(najafi_phi(1.0, 0.3), 2, 1.0)),
        ("najafi_3d", SphericalMetric::new(najafi_phi(1.0, 0.3), 3, 1.0)),
        ("generic", generic),
    ]
    .into_iter()
    .map(|(n, m)| (n, m.expect("valid spherical profile")))
    .collect()
}

/// Sampling region for a spherical case: the ball of radius `r0`, away
/// from the origin.
pub fn spherical_region(m: &SphericalMetric) -> Region {
    let mut r = Region::cube(m.dimension, m.r0);
    r.ball = Some(m.r0);
    r.min_radius = Some(crate::spherical::MIN_RADIUS);
    r
}

pub fn spherical_suite(opts: &SuiteOptions) -> SuiteOutcome {
    let mut tally = Tally::new("spherical");
    for (name, sm) in spherical_cases() {
        let metric = sm.metric(name).expect("spherical metric");
        let sites = match sample_sites(
            std::slice::from_ref(&metric),
            &spherical_region(&sm),
            opts.seed,
            opts.sites,
        ) {
            Ok(s) => s,
            Err(e) => {
                tally.error(|| name.to_string(), &e);
                continue;
            }
        };
        for p in &sites {
            let check = || -> Result<[f64; 4]> {
                let (_, r, s) = polar(p);
                let j = sm.phi_jet(r, s)?;
                let sg = sigma(&j);
                let id1 = (s * sg.s2 + sg.s3).abs() / 1f64.max((s * sg.s2).abs()).max(sg.s3.abs());
                let id2 = rel(s * sg.s1 + sg.s2, j.phi * j.phi_s);
                let g = max_rel(
                    sm.metric_tensor(p)?.as_slice().unwrap(),
                    metric_tensor(&metric, p)?.as_slice().unwrap(),
                );
                let spray = max_rel(
                    sm.spray(p)?.as_slice().unwrap(),
                    spray_coefficients(&metric, p)?.as_slice().unwrap(),
                );
                let h = max_rel(
                    sm.covariant(p)?.as_slice().unwrap(),
                    covariant_coefficients(&metric, p)?.as_slice().unwrap(),
                );
                Ok([id1.max(id2), g, spray, h])
            };
            match check() {
                Ok([sig, g, spray, h]) => {
                    tally.below(|| format!("{name} sigma identities at {p:?}"), sig, 1e-12);
                    tally.below(|| format!("{name} g at {p:?}"), g, opts.spherical_tol);
                    tally.below(|| format!("{name} G at {p:?}"), spray, opts.spherical_tol);
                    tally.below(|| format!("{name} H at {p:?}"), h, opts.spherical_tol);
                }
                Err(e) => tally.error(|| format!("{name} at {p:?}"), &e),
            }
        }
    }
    tally.finish()
}

/// `G^4 = y4^2/(4 x4)` and `H_4 = y4^2/4`, all other components zero.
pub fn ex37_closed_form(p: &ChartPoint) -> (Array1<f64>, Array1<f64>) {
    let mut g = Array1::zeros(4);
    let mut h = Array1::zeros(4);
    g[3] = 0.25 * p.y[3] * p.y[3] / p.x[3];
    h[3] = 0.25 * p.y[3] * p.y[3];
    (g, h)
}

/// `H_i = (c/2)|y| y_i + 1/2 |y|^2 (a_i + x_i)`.
pub fn ex51_covariant(c: f64, a: &[f64], p: &ChartPoint) -> Array1<f64> {
    let u = p.y_norm();
    Array1::from_shape_fn(p.dimension(), |i| 0.5 * c * u * p.y[i] + 0.5 * u * u * (a[i] + p.x[i]))
}

/// The covariant coefficients of the rational quartic example in its reference form,
/// with `f1 = x3^2` and `f2 = x3^3`.
pub fn ex52_reference_covariant(p: &ChartPoint) -> Array1<f64> {
    let (y, x3) = (&p.y, p.x[2]);
    let (d1, d2) = (2.0 * x3, 3.0 * x3 * x3);
    Array1::from_vec(vec![
        2.0 * y[0] * y[2] * d1,
        2.0 * y[1] * y[2] * d2,
        -y[0] * y[0] * d1 - y[1] * y[1] * d2,
    ])
}

/// Closed forms with known values: the quartic-root and Randers examples,
/// the rational quartic example (as derived, one quarter of the reference
/// form), and the Najafi S-scalar.
pub fn oracle_suite(opts: &SuiteOptions) -> SuiteOutcome {
    let mut tally = Tally::new("closed_forms");
    let tol = opts.identity_tol;
    let mut run = |name: &str, check: &dyn Fn(&FinslerMetric, &ChartPoint) -> Result<f64>| {
        let entry = builtin(name).expect("builtin");
        let metric = entry.metric().expect("builtin metric");
        match entry.sample(opts.seed, opts.classify_sites) {
            Ok(sites) => {
                for p in &sites {
                    match check(&metric, p) {
                        Ok(r) => tally.below(|| format!("{name} at {p:?}"), r, tol),
                        Err(e) => tally.error(|| format!("{name} at {p:?}"), &e),
                    }
                }
            }
            Err(e) => tally.error(|| name.to_string(), &e),
        }
    };
    run("ex37", &|m, p| {
        let (g, h) = ex37_closed_form(p);
        Ok(
            max_rel(spray_coefficients(m, p)?.as_slice().unwrap(), g.as_slice().unwrap()).max(max_rel(
                covariant_coefficients(m, p)?.as_slice().unwrap(),
                h.as_slice().unwrap(),
            )),
        )
    });
    for (name, shift) in [
        ("ex51", 0.0),
        ("ex51_3d", 0.0),
        ("ex51_shifted", 0.1),
        ("ex51_shifted_3d", 0.1),
    ] {
        run(name, &move |m, p| {
            let a = vec![shift; p.dimension()];
            Ok(max_rel(
                covariant_coefficients(m, p)?.as_slice().unwrap(),
                ex51_covariant(1.0, &a, p).as_slice().unwrap(),
            ))
        });
    }
    run("ex52", &|m, p| {
        let derived = ex52_reference_covariant(p).mapv(|v| 0.25 * v);
        Ok(max_rel(
            covariant_coefficients(m, p)?.as_slice().unwrap(),
            derived.as_slice().unwrap(),
        ))
    });
    for (name, c) in [
        ("najafi", 0.3),
        ("najafi_3d", 0.3),
        ("najafi_c01", 0.1),
        ("najafi_c01_3d", 0.1),
    ] {
        run(name, &move |m, p| {
            Ok(rel(s_scalar_candidate(m, p)?, najafi_s_scalar(1.0, c, p)))
        });
    }
    let bar = builtin("ex33_pair")
        .and_then(|e| e.companion_metric())
        .map(|m| m.expect("ex33_pair has a companion"));
    match bar {
        Ok(bar) => run("ex33_pair", &move |m, p| {
            let a = [0.0, 0.5];
            let big_a = 1.0 + a[0] * p.x[0] + a[1] * p.x[1];
            let big_b = a[0] * p.y[0] + a[1] * p.y[1];
            let (h, hb) = (covariant_coefficients(m, p)?, covariant_coefficients(&bar, p)?);
            let got: Vec<f64> = (0..2).map(|i| hb[i] - h[i]).collect();
            let want: Vec<f64> = (0..2).map(|i| -big_b * big_b * a[i] / big_a.powi(5)).collect();
            Ok(max_rel(&got, &want))
        }),
        Err(e) => tally.error(|| "ex33_pair companion".into(), &e),
    }
    let origin = ChartPoint::new(vec![0.0, 0.0], vec![1.0, 0.0]).expect("valid point");
    tally.below(
        || "najafi S-scalar spot value".into(),
        (najafi_s_scalar(1.0, 0.3, &origin) - 0.05).abs(),
        tol,
    );
    tally.finish()
}

/// `x_i = x~_i + 0.1 x~_i^2` in `n` dimensions.
pub fn quadratic_change(n: usize) -> CoordinateChange {
    let psi = (1..=n)
        .map(|i| parse_metric(&format!("x{i} + 0.1*x{i}^2"), n).expect("valid map"))
        .collect();
    CoordinateChange::new(psi, n).expect("valid change")
}

pub fn transformation_suite(opts: &SuiteOptions) -> SuiteOutcome {
    let mut tally = Tally::new("transformation_law");
    let mut body = || -> Result<()> {
        let entry = builtin("ex51")?;
        let metric = entry.metric()?;
        let change = quadratic_change(2);
        let ft = transformed_metric(&metric, &change)?;
        let sites = sample_sites(std::slice::from_ref(&ft), &entry.region, opts.seed, 20)?;
        let law = transformation_law_check(&metric, &change, &sites, opts.transform_tol)?;
        tally.below(
            || "quadratic change on ex51".into(),
            law.verdict.max_residual,
            opts.transform_tol,
        );
        tally.require(
            || "quadratic change has a second-derivative term".into(),
            law.max_second_term > 0.0,
        );

        let affine = CoordinateChange::affine(&[vec![1.5, 0.2], vec![-0.1, 0.8]], &[0.05, -0.02])?;
        let fa = transformed_metric(&metric, &affine)?;
        let sites_a = sample_sites(std::slice::from_ref(&fa), &entry.region, opts.seed, 20)?;
        let law_a = transformation_law_check(&metric, &affine, &sites_a, opts.transform_tol)?;
        tally.below(
            || "affine change on ex51".into(),
            law_a.verdict.max_residual,
            opts.transform_tol,
        );
        tally.require(|| "affine change is symbolically affine".into(), affine.is_affine());
        tally.require(
            || format!("affine second term {:e}", law_a.max_second_term),
            law_a.max_second_term == 0.0,
        );
        tally.below(
            || "affine non-connection defect".into(),
            non_connection_witness(&metric, &affine, &sites_a[0])?,
            opts.transform_tol,
        );
        for p in sites.iter().take(5) {
            tally.below(
                || format!("projective construction defect at {p:?}"),
                projective_construction_defect(&metric, &change, p)?,
                opts.transform_tol,
            );
        }
        let ex37 = builtin("ex37")?;
        let change4 = quadratic_change(4);
        let f37 = transformed_metric(&ex37.metric()?, &change4)?;
        let p = sample_sites(std::slice::from_ref(&f37), &ex37.region, opts.seed, 1)?.remove(0);
        let defect = non_connection_witness(&ex37.metric()?, &change4, &p)?;
        tally.require(
            || format!("ex37 non-connection defect {defect:e} not above 1e-4"),
            defect > 1e-4,
        );
        Ok(())
    };
    if let Err(e) = body() {
        tally.error(|| "transformation suite".into(), &e);
    }
    tally.finish()
}

/// Byte-identical reports for a repeated seed, and unchanged verdicts for a
/// different seed.
pub fn determinism_suite(opts: &SuiteOptions) -> SuiteOutcome {
    let mut tally = Tally::new("determinism");
    let sites = opts.classify_sites.min(20);
    let tol = crate::classify::DEFAULT_TOLERANCE;
    for entry in entries() {
        let run = |seed| classify_entry(&entry, seed, sites, tol);
        match (run(opts.seed), run(opts.seed), run(opts.seed.wrapping_add(1))) {
            (Ok(a), Ok(b), Ok(c)) => {
                tally.require(
                    || format!("{}: repeated run differs", entry.name),
                    a.to_json() == b.to_json(),
                );
                for p in &a.predicates {
                    tally.require(
                        || format!("{}.{}: verdict changes with the seed", entry.name, p.name),
                        c.verdict(&p.name) == Some(p.verdict),
                    );
                }
            }
            (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => tally.error(|| entry.name.to_string(), &e),
        }
    }
    tally.finish()
}

pub const SUITES: [&str; 7] = [
    "identities",
    "regression",
    "finite_differences",
    "spherical",
    "closed_forms",
    "transformation_law",
    "determinism",
];

pub fn run_suite(name: &str, opts: &SuiteOptions) -> Option<SuiteOutcome> {
    Some(match name {
        "identities" => identity_suite(opts),
        "regression" => regression_suite(opts),
        "finite_differences" => fd_suite(opts),
        "spherical" => spherical_suite(opts),
        "closed_forms" => oracle_suite(opts),
        "transformation_law" => transformation_suite(opts),
        "determinism" => determinism_suite(opts),
        _ => return None,
    })
}

pub fn run_all(opts: &SuiteOptions) -> Vec<SuiteOutcome> {
    SUITES
        .iter()
        .map(|n| run_suite(n, opts).expect("known suite"))
        .collect()
}
