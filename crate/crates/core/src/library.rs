//! Builtin metrics with their expected classification and sampling regions.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classify::Verdict;
use crate::error::{Error, Result};
use crate::expr::{MetricDefinition, MetricSource};
use crate::geometry::{metric_tensor, ChartPoint, FinslerMetric};
use crate::linalg::is_positive_definite;
use crate::spherical::{najafi_metric_text, najafi_phi, SphericalMetric, MIN_RADIUS};

pub const REDRAW_CAP: usize = 100;

/// Where sample sites are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// Per-coordinate bounds for `x`.
    pub x_box: Vec<(f64, f64)>,
    /// Keep `|x|` below this radius.
    pub ball: Option<f64>,
    /// Keep `|x|` at or above this radius.
    pub min_radius: Option<f64>,
    /// Bounds for `|y|`, drawn log-uniformly.
    pub y_norm: (f64, f64),
}

impl Region {
    pub fn cube(dimension: usize, half: f64) -> Self {
        Region {
            x_box: vec![(-half, half); dimension],
            ball: None,
            min_radius: None,
            y_norm: (0.1, 10.0),
        }
    }

    /// Default region for user metric files.
    pub fn default_for(metric: &FinslerMetric) -> Self {
        let mut r = Region::cube(metric.dimension, 0.5);
        if metric.profile.is_some() {
            r.min_radius = Some(MIN_RADIUS);
        }
        r
    }

    fn with_box(mut self, i: usize, lo: f64, hi: f64) -> Self {
        self.x_box[i] = (lo, hi);
        self
    }

    fn with_ball(mut self, radius: f64) -> Self {
        self.ball = Some(radius);
        self
    }

    fn away_from_origin(mut self) -> Self {
        self.min_radius = Some(MIN_RADIUS);
        self
    }
}

#[derive(Debug, Clone)]
pub struct LibraryEntry {
    pub name: &'static str,
    /// Metric-definition file content.
    pub text: String,
    /// Second metric for entries that compare two metrics.
    pub companion: Option<String>,
    pub region: Region,
    pub expected: BTreeMap<&'static str, Verdict>,
    pub provenance: &'static str,
}

impl LibraryEntry {
    pub fn definition(&self) -> Result<MetricDefinition> {
        MetricDefinition::parse(self.name, &self.text)
    }

    pub fn metric(&self) -> Result<FinslerMetric> {
        FinslerMetric::from_definition(&self.definition()?)
    }

    pub fn companion_metric(&self) -> Result<Option<FinslerMetric>> {
        self.companion
            .as_ref()
            .map(|t| FinslerMetric::from_definition(&MetricDefinition::parse(&format!("{}_bar", self.name), t)?))
            .transpose()
    }

    /// The entry as a spherically symmetric metric, if it is one.
    pub fn spherical(&self) -> Option<Result<SphericalMetric>> {
        let def = match self.definition() {
            Ok(d) => d,
            Err(e) => return Some(Err(e)),
        };
        if let MetricSource::Spherical(phi) = &def.source {
            let phi = phi.bind_params(&def.params);
            return Some(SphericalMetric::new(
                phi,
                def.dimension,
                self.region.ball.unwrap_or(1.0),
            ));
        }
        if !self.name.starts_with("najafi") {
            return None;
        }
        let (k, c) = (def.params["k"], def.params["c"]);
        let r0 = if c == 0.0 { f64::INFINITY } else { (k / c).abs() };
        Some(SphericalMetric::new(najafi_phi(k, c), def.dimension, r0))
    }

    /// Every metric the entry's sites must be valid for.
    pub fn metrics(&self) -> Result<Vec<FinslerMetric>> {
        let mut out = vec![self.metric()?];
        out.extend(self.companion_metric()?);
        Ok(out)
    }

    pub fn sample(&self, seed: u64, count: usize) -> Result<Vec<ChartPoint>> {
        sample_sites(&self.metrics()?, &self.region, seed, count)
    }
}

fn flags(items: &[(&'static str, Verdict)]) -> BTreeMap<&'static str, Verdict> {
    items.iter().copied().collect()
}

const ALL_PREDICATES: [&str; 10] = [
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

fn euclidean_sum(v: char, n: usize) -> String {
    (1..=n).map(|i| format!("{v}{i}^2")).collect::<Vec<_>>().join(" + ")
}

fn ex51_text(n: usize, shift: f64) -> String {
    let mut text = format!("dimension = {n}\nparam c = 1\n");
    for i in 1..=n {
        text += &format!("param a{i} = {shift}\n");
    }
    let linear: Vec<String> = (1..=n).map(|i| format!("(a{i} + x{i})*y{i}")).collect();
    text += &format!(
        "metric = \"c*sqrt({}) + {}\"\n",
        euclidean_sum('y', n),
        linear.join(" + ")
    );
    text
}

fn najafi_text(n: usize, c: f64) -> String {
    format!(
        "dimension = {n}\nparam k = 1\nparam c = {c}\nmetric = \"{}\"\ndomain = \"k^2 - c^2*({})\"\n",
        najafi_metric_text(n),
        euclidean_sum('x', n)
    )
}

/// `<a,y> sqrt(c + z1^2 + z2^2)/(1 + <a,x>)^2` with
/// `z_i = ((1 + <a,x>) y_i - <a,y> x_i)/<a,y>`, with `<a,y>` moved under the
/// root (valid where `<a,y> > 0`).
fn ex33_text(constant: &str) -> String {
    let w = |i: usize| format!("(1 + a1*x1 + a2*x2)*y{i} - (a1*y1 + a2*y2)*x{i}");
    format!(
        "dimension = 2\nparam a1 = 0\nparam a2 = 0.5\n\
         metric = \"sqrt({constant}({})^2 + ({})^2)/(1 + a1*x1 + a2*x2)^2\"\n\
         domain = \"a1*y1 + a2*y2\"\n",
        w(1),
        w(2)
    )
}

const EX52_TEXT: &str = "\
dimension = 3
param a1 = 1
param a2 = 1
param a3 = 1
param b1 = 1
param b2 = 1
param b3 = 1
metric = \"sqrt((a1*y1^4 + a2*y1^2*y3^2 + a3*y2^2*y3^2)/(b1*y1^2 + b2*y2^2 + b3*y3^2) + x3^2*y1^2 + x3^3*y2^2)\"
";

const EX37_TEXT: &str = "\
dimension = 4
metric = \"sqrt(sqrt(y1^4+y2^4+y3^4)+x4*y4^2)\"
";

const SPHERICAL_GENERIC_TEXT: &str = "\
dimension = 2
spherical_phi = \"1 + s/4 + s^2/8 + r^2/2\"
";

pub fn builtin_names() -> Vec<&'static str> {
    let mut names = vec![
        "euclidean_2d",
        "euclidean_3d",
        "riemannian_curved",
        "ex33_pair",
        "ex37",
        "ex51",
        "ex51_3d",
        "ex51_shifted",
        "ex51_shifted_3d",
        "ex52",
        "najafi",
        "najafi_3d",
        "najafi_c01",
        "najafi_c01_3d",
        "spherical_generic",
    ];
    names.sort_unstable();
    names
}

pub fn builtin(name: &str) -> Result<LibraryEntry> {
    use Verdict::{Fails, Holds};
    let all_hold = || ALL_PREDICATES.iter().map(|p| (*p, Holds)).collect::<BTreeMap<_, _>>();
    let ex51_flags = flags(&[
        ("projectively_flat", Holds),
        ("h_landsberg", Holds),
        ("h_berwald", Fails),
        ("dually_flat", Fails),
        ("s_scalar_exists", Fails),
        ("berwald", Fails),
    ]);
    let najafi_flags = flags(&[
        ("dually_flat", Holds),
        ("s_scalar_exists", Holds),
        ("projectively_flat", Holds),
        ("h_landsberg", Holds),
        ("h_berwald", Fails),
    ]);
    let entry = |name: &'static str, text: String, region: Region, expected, provenance| LibraryEntry {
        name,
        text,
        companion: None,
        region,
        expected,
        provenance,
    };
    Ok(match name {
        "euclidean_2d" | "euclidean_3d" => {
            let n = if name == "euclidean_2d" { 2 } else { 3 };
            entry(
                if n == 2 { "euclidean_2d" } else { "euclidean_3d" },
                format!("dimension = {n}\nmetric = \"sqrt({})\"\n", euclidean_sum('y', n)),
                Region::cube(n, 1.0),
                all_hold(),
                "baseline: flat Euclidean norm",
            )
        }
        "riemannian_curved" => {
            let mut expected = all_hold();
            expected.insert("projectively_flat", Fails);
            entry(
                "riemannian_curved",
                "dimension = 2\nmetric = \"sqrt((1 + x1^2)*y1^2 + y2^2)\"\n".into(),
                Region::cube(2, 1.0),
                expected,
                "baseline: Riemannian with nonzero spray and vanishing Cartan tensor",
            )
        }
        "ex33_pair" => LibraryEntry {
            name: "ex33_pair",
            text: ex33_text(""),
            companion: Some(ex33_text("(a1*y1 + a2*y2)^2 + ")),
            region: Region::cube(2, 0.3).with_ball(0.3),
            expected: flags(&[
                ("projectively_flat", Holds),
                ("berwald", Holds),
                ("h_berwald", Holds),
                ("h_landsberg", Holds),
            ]),
            provenance: "two metrics sharing one spray with different covariant coefficients",
        },
        "ex37" => {
            let mut expected = all_hold();
            expected.insert("projectively_flat", Fails);
            entry(
                "ex37",
                EX37_TEXT.into(),
                Region::cube(4, 1.0).with_box(3, 0.1, 2.0),
                expected,
                "quartic-root metric with a single quadratic spray coefficient",
            )
        }
        "ex51" => entry("ex51", ex51_text(2, 0.0), Region::cube(2, 0.3), ex51_flags, EX51_NOTE),
        "ex51_3d" => entry(
            "ex51_3d",
            ex51_text(3, 0.0),
            Region::cube(3, 0.3),
            ex51_flags,
            EX51_NOTE,
        ),
        "ex51_shifted" => entry(
            "ex51_shifted",
            ex51_text(2, 0.1),
            Region::cube(2, 0.3),
            ex51_flags,
            EX51_NOTE,
        ),
        "ex51_shifted_3d" => entry(
            "ex51_shifted_3d",
            ex51_text(3, 0.1),
            Region::cube(3, 0.3),
            ex51_flags,
            EX51_NOTE,
        ),
        "ex52" => entry(
            "ex52",
            EX52_TEXT.into(),
            Region::cube(3, 1.0).with_box(2, 0.5, 1.5),
            flags(&[("h_berwald", Holds), ("h_landsberg", Holds)]),
            "rational quartic metric with quadratic covariant coefficients",
        ),
        "najafi" => entry(
            "najafi",
            najafi_text(2, 0.3),
            najafi_region(2),
            najafi_flags,
            NAJAFI_NOTE,
        ),
        "najafi_3d" => entry(
            "najafi_3d",
            najafi_text(3, 0.3),
            najafi_region(3),
            najafi_flags,
            NAJAFI_NOTE,
        ),
        "najafi_c01" => entry(
            "najafi_c01",
            najafi_text(2, 0.1),
            najafi_region(2),
            najafi_flags,
            NAJAFI_NOTE,
        ),
        "najafi_c01_3d" => entry(
            "najafi_c01_3d",
            najafi_text(3, 0.1),
            najafi_region(3),
            najafi_flags,
            NAJAFI_NOTE,
        ),
        "spherical_generic" => entry(
            "spherical_generic",
            SPHERICAL_GENERIC_TEXT.into(),
            Region::cube(2, 0.6).with_ball(0.9).away_from_origin(),
            BTreeMap::new(),
            "baseline: generic spherically symmetric profile",
        ),
        other => return Err(Error::UnknownBuiltin(other.to_string())),
    })
}

const EX51_NOTE: &str = "Randers-type metric c|y| + <a,y> + <x,y>: projectively flat, H-Landsberg, not H-Berwald";
const NAJAFI_NOTE: &str = "projectively and dually flat spherically symmetric family";

fn najafi_region(n: usize) -> Region {
    Region::cube(n, 0.5).away_from_origin()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn draw(rng: &mut ChaCha8Rng, region: &Region) -> (Vec<f64>, Vec<f64>) {
    let n = region.x_box.len();
    let x: Vec<f64> = region.x_box.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect();
    let dir = loop {
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let len = norm(&d);
        if len > 1e-3 && len <= 1.0 {
            break d.into_iter().map(|v| v / len).collect::<Vec<_>>();
        }
    };
    let (lo, hi) = region.y_norm;
    let mag = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
    (x, dir.into_iter().map(|v| v * mag).collect())
}

/// Which constraint a candidate violates, if any.
fn violation(
    metrics: &[FinslerMetric],
    region: &Region,
    x: Vec<f64>,
    y: Vec<f64>,
) -> std::result::Result<ChartPoint, &'static str> {
    let r = norm(&x);
    if region.ball.is_some_and(|b| r >= b) {
        return Err("|x| inside the sampling ball");
    }
    if region.min_radius.is_some_and(|m| r < m) {
        return Err("|x| away from the origin");
    }
    let p = ChartPoint::new(x, y).map_err(|_| "y != 0")?;
    for m in metrics {
        if let Some(d) = &m.domain {
            match crate::expr::evaluate_at(d, &p.x, &p.y) {
                Ok(v) if v > 0.0 => {}
                _ => return Err("domain expression positive"),
            }
        }
        match m.value(&p) {
            Ok(f) if f > 0.0 => {}
            _ => return Err("F > 0"),
        }
        let g = metric_tensor(m, &p).map_err(|e| match e {
            Error::Degenerate(_) => "condition number of g <= 1e12",
            _ => "F smooth at the site",
        })?;
        if !is_positive_definite(&g) {
            return Err("g positive definite");
        }
    }
    Ok(p)
}

/// Deterministic valid sites for all of `metrics` at once.
pub fn sample_sites(metrics: &[FinslerMetric], region: &Region, seed: u64, count: usize) -> Result<Vec<ChartPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sites = Vec::with_capacity(count);
    let mut misses: HashMap<&'static str, usize> = HashMap::new();
    while sites.len() < count {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let (x, y) = draw(&mut rng, region);
            match violation(metrics, region, x, y) {
                Ok(p) => {
                    sites.push(p);
                    break;
                }
                Err(why) => *misses.entry(why).or_default() += 1,
            }
            if attempts > REDRAW_CAP {
                let constraint = misses
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .map(|(k, _)| k.to_string())
                    .unwrap_or_default();
                return Err(Error::SamplingExhausted { attempts, constraint });
            }
        }
    }
    Ok(sites)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_parses_and_samples() {
        for name in builtin_names() {
            let e = builtin(name).unwrap();
            assert_eq!(e.name, name);
            let sites = e.sample(42, 5).unwrap_or_else(|err| panic!("{name}: {err}"));
            assert_eq!(sites.len(), 5);
        }
        assert!(matches!(builtin("nope"), Err(Error::UnknownBuiltin(_))));
    }

    #[test]
    fn euclidean_entry_and_sampler_contract() {
        let e = builtin("euclidean_2d").unwrap();
        assert_eq!(e.metric().unwrap().f.to_string(), "sqrt(y1^2 + y2^2)");
        let sites = e.sample(42, 3).unwrap();
        assert_eq!(sites.len(), 3);
        for p in &sites {
            let u = p.y_norm();
            assert!((0.1..=10.0).contains(&u));
        }
        assert_eq!(sites, e.sample(42, 3).unwrap());
        assert_ne!(sites, e.sample(43, 3).unwrap());
    }

    #[test]
    fn ex51_matches_closed_form() {
        let m = builtin("ex51").unwrap().metric().unwrap();
        let p = ChartPoint::new(vec![0.1, 0.2], vec![3.0, 4.0]).unwrap();
        assert!((m.value(&p).unwrap() - (5.0 + 0.3 + 0.8)).abs() < 1e-14);
    }

    #[test]
    fn najafi_sites_respect_constraints() {
        let e = builtin("najafi").unwrap();
        for p in e.sample(42, 20).unwrap() {
            let r = norm(&p.x);
            assert!(0.09 * r * r < 1.0 && r > 1e-6);
        }
    }

    #[test]
    fn ex37_sites_keep_x4_positive() {
        let e = builtin("ex37").unwrap();
        let m = e.metric().unwrap();
        for p in e.sample(42, 20).unwrap() {
            assert!(p.x[3] >= 0.1);
            assert!(m.value(&p).unwrap() > 0.0);
        }
    }

    #[test]
    fn ex33_sites_are_valid_for_both_metrics() {
        let e = builtin("ex33_pair").unwrap();
        let sites = e.sample(42, 10).unwrap();
        for p in &sites {
            assert!(norm(&p.x) < 0.3);
            assert!(0.5 * p.y[1] > 0.0);
        }
    }

    #[test]
    fn ex33_forms_agree_with_quotient_form() {
        let e = builtin("ex33_pair").unwrap();
        let (f, fbar) = (e.metric().unwrap(), e.companion_metric().unwrap().unwrap());
        let z = "((1 + 0.5*x2)*y{i} - 0.5*y2*x{i})/(0.5*y2)";
        let zs = |i: usize| z.replace("{i}", &i.to_string());
        let quotient = |c: &str| {
            let text = format!("0.5*y2*sqrt({c}({})^2 + ({})^2)/(1 + 0.5*x2)^2", zs(1), zs(2));
            crate::expr::parse_metric(&text, 2).unwrap()
        };
        let (q, qbar) = (quotient(""), quotient("1 + "));
        for p in e.sample(42, 10).unwrap() {
            let direct = crate::expr::evaluate_at(&q, &p.x, &p.y).unwrap();
            let direct_bar = crate::expr::evaluate_at(&qbar, &p.x, &p.y).unwrap();
            assert!((f.value(&p).unwrap() - direct).abs() < 1e-12 * direct.max(1.0));
            assert!((fbar.value(&p).unwrap() - direct_bar).abs() < 1e-12 * direct_bar.max(1.0));
        }
    }

    #[test]
    fn exhausted_sampling_names_the_constraint() {
        let def = MetricDefinition::parse("neg", "dimension = 1\nmetric = \"y1\"\ndomain = \"-1\"\n").unwrap();
        let m = FinslerMetric::from_definition(&def).unwrap();
        match sample_sites(&[m], &Region::cube(1, 1.0), 1, 1) {
            Err(Error::SamplingExhausted { constraint, .. }) => assert_eq!(constraint, "domain expression positive"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn entries_export_as_metric_files() {
        for name in builtin_names() {
            let def = builtin(name).unwrap().definition().unwrap();
            let again = MetricDefinition::parse(name, &def.to_file_text()).unwrap();
            assert_eq!(def, again, "{name}");
        }
    }
}
