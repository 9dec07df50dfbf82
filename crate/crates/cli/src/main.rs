mod eval;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use finsler_core::classify::{classify_entry, classify_metric, ClassificationReport, ClassifyOptions};
use finsler_core::expr::{MetricDefinition, MetricSource};
use finsler_core::geometry::{ChartPoint, FinslerMetric};
use finsler_core::library::{builtin, builtin_names};
use finsler_core::spherical::SphericalMetric;
use finsler_core::suites::{run_all, SuiteOptions};
use finsler_core::Error;
use serde_json::json;

use eval::Quantity;

#[derive(Parser, Debug)]
#[command(
    name = "finsler",
    version,
    about = "Spray and covariant-coefficient analysis of Finsler metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classify a metric over seeded random sites.
    Classify(ClassifyArgs),
    /// Evaluate one quantity at one point.
    Eval(EvalArgs),
    /// Run every verification suite over the builtin library.
    Verify(VerifyArgs),
    /// List the builtin metrics.
    List,
    /// Print a builtin metric as a definition file.
    Export {
        #[arg(long)]
        builtin: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct Source {
    /// Metric definition file.
    #[arg(long)]
    metric: Option<PathBuf>,
    /// Builtin library entry.
    #[arg(long)]
    builtin: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Human,
    Report,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 50, value_parser = site_count)]
    sites: usize,
    #[arg(long, default_value_t = 1e-9, value_parser = positive)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Report)]
    format: Format,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    source: Source,
    /// Position, comma separated; defaults to the origin.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Option<Vec<f64>>,
    /// Direction, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    y: Vec<f64>,
    #[arg(long, value_enum)]
    q: Quantity,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Human)]
    format: Format,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 25, value_parser = site_count)]
    sites: usize,
    /// Overrides every suite tolerance.
    #[arg(long, value_parser = positive)]
    tol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Human)]
    format: Format,
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be positive, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn site_count(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("at least one site is required".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

/// Failure that maps to an exit status.
struct Fail(u8, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(2, e.to_string())
    }
}

type Outcome = Result<u8, Fail>;

fn emit(out: Option<&Path>, text: &str) -> Result<(), Fail> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Fail(2, format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Fail(2, format!("cannot write output: {e}"))),
                _ => Ok(()),
            }
        }
    }
}

fn read_definition(path: &Path) -> Result<MetricDefinition, Fail> {
    let text = fs::read_to_string(path).map_err(|e| Fail(2, format!("cannot read {}: {e}", path.display())))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "metric".into());
    MetricDefinition::parse(&name, &text).map_err(|e| Fail(2, format!("{}: {e}", path.display())))
}

fn classify(args: &ClassifyArgs) -> Outcome {
    let report: ClassificationReport = match (&args.source.metric, &args.source.builtin) {
        (Some(path), _) => {
            let def = read_definition(path)?;
            let options = ClassifyOptions {
                seed: args.seed,
                sites: args.sites,
                tolerance: args.tol,
                ..ClassifyOptions::default()
            };
            classify_metric(&def, &options)?
        }
        (None, Some(name)) => classify_entry(&builtin(name)?, args.seed, args.sites, args.tol)?,
        (None, None) => unreachable!("clap enforces a source"),
    };
    let text = match args.format {
        Format::Report => report.to_json(),
        Format::Human => report.to_human(),
    };
    emit(args.out.as_deref(), text.trim_end())?;
    match &report.sampling_error {
        Some(msg) => Err(Fail(2, format!("sampling failed: {msg}"))),
        None => Ok(0),
    }
}

fn metric_with_profile(source: &Source) -> Result<(FinslerMetric, Option<SphericalMetric>), Fail> {
    match (&source.metric, &source.builtin) {
        (Some(path), _) => {
            let def = read_definition(path)?;
            let metric = FinslerMetric::from_definition(&def)?;
            let spherical = match &def.source {
                MetricSource::Spherical(_) => SphericalMetric::from_metric(&metric, f64::INFINITY).transpose()?,
                MetricSource::Expression(_) => None,
            };
            Ok((metric, spherical))
        }
        (None, Some(name)) => {
            let entry = builtin(name)?;
            Ok((entry.metric()?, entry.spherical().transpose()?))
        }
        (None, None) => unreachable!("clap enforces a source"),
    }
}

fn evaluate(args: &EvalArgs) -> Outcome {
    let (metric, spherical) = metric_with_profile(&args.source)?;
    let x = args.x.clone().unwrap_or_else(|| vec![0.0; metric.dimension]);
    let p = ChartPoint::new(x, args.y.clone())?;
    let value = eval::evaluate(&metric, spherical.as_ref(), &p, args.q)?;
    let text = match args.format {
        Format::Human => eval::human(args.q.label(), &value),
        Format::Report => {
            let doc = json!({
                "metric": metric.name,
                "quantity": args.q.label(),
                "x": p.x.iter().map(|v| eval::number(*v)).collect::<Vec<_>>(),
                "y": p.y.iter().map(|v| eval::number(*v)).collect::<Vec<_>>(),
                "value": value,
            });
            serde_json::to_string_pretty(&doc).map_err(|e| Fail(2, e.to_string()))?
        }
    };
    emit(args.out.as_deref(), &text)?;
    Ok(0)
}

fn verify(args: &VerifyArgs) -> Outcome {
    let mut opts = SuiteOptions {
        seed: args.seed,
        sites: args.sites,
        ..SuiteOptions::default()
    };
    if let Some(tol) = args.tol {
        opts = opts.with_tolerance(tol);
    }
    let outcomes = run_all(&opts);
    let text = match args.format {
        Format::Report => serde_json::to_string_pretty(&outcomes).map_err(|e| Fail(2, e.to_string()))?,
        Format::Human => {
            let mut t = format!("{:<20} {:<6} {:>12} {:>8}\n", "suite", "result", "worst", "checks");
            for o in &outcomes {
                t += &format!(
                    "{:<20} {:<6} {:>12.3e} {:>8}\n",
                    o.name,
                    if o.passed { "pass" } else { "FAIL" },
                    o.worst,
                    o.checks
                );
            }
            t
        }
    };
    emit(args.out.as_deref(), text.trim_end())?;
    match outcomes.iter().find(|o| !o.passed) {
        Some(o) => Err(Fail(
            1,
            format!("{} failed: {}", o.name, o.witness.as_deref().unwrap_or("no witness")),
        )),
        None => Ok(0),
    }
}

fn list() -> Outcome {
    let mut lines = Vec::new();
    for name in builtin_names() {
        let e = builtin(name)?;
        lines.push(format!("{name:<18} {}", e.provenance));
    }
    emit(None, &lines.join("\n"))?;
    Ok(0)
}

fn export(name: &str, out: Option<&Path>) -> Outcome {
    let def = builtin(name)?.definition()?;
    emit(out, def.to_file_text().trim_end())?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Classify(a) => classify(a),
        Command::Eval(a) => evaluate(a),
        Command::Verify(a) => verify(a),
        Command::List => list(),
        Command::Export { builtin, out } => export(builtin, out.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
