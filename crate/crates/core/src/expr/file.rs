//! Line-oriented metric definition files.
//!
//! ```text
//! # Randers-type metric
//! dimension = 2
//! param c = 1
//! metric = "c*sqrt(y1^2+y2^2) + x1*y1 + x2*y2"
//! domain = "1 - x1^2 - x2^2"
//! ```
//!
//! `spherical_phi = "<expression in r, s>"` may replace `metric =`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{parse_with, Expr, ParseOptions, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum MetricSource {
    /// `F(x, y)` directly.
    Expression(Expr),
    /// Profile `phi(r, s)` of a spherically symmetric metric `F = |y| phi`;
    /// `r` is stored as `x1` and `s` as `y1`.
    Spherical(Expr),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricDefinition {
    pub name: String,
    pub dimension: usize,
    pub source: MetricSource,
    pub params: BTreeMap<String, f64>,
    /// Sites must make this expression positive.
    pub domain: Option<Expr>,
}

pub(crate) fn spherical_parse_options(params: impl IntoIterator<Item = String>) -> ParseOptions {
    ParseOptions::new(1)
        .with_params(params)
        .with_alias("r", Var::x(1))
        .with_alias("s", Var::y(1))
}

struct Quoted {
    text: String,
    line: usize,
    column: usize,
}

fn unquote(value: &str, line: usize, column: usize) -> Result<Quoted> {
    let trimmed = value.trim();
    let lead = value.len() - value.trim_start().len();
    if trimmed.len() < 2 || !trimmed.starts_with('"') || !trimmed.ends_with('"') {
        return Err(Error::MetricFile {
            line,
            message: "expected a double-quoted expression".into(),
        });
    }
    Ok(Quoted {
        text: trimmed[1..trimmed.len() - 1].to_string(),
        line,
        column: column + lead + 1,
    })
}

fn parse_quoted(q: &Quoted, options: &ParseOptions) -> Result<Expr> {
    parse_with(&q.text, options).map_err(|e| match e {
        Error::Syntax {
            line: 1,
            column,
            message,
        } => Error::Syntax {
            line: q.line,
            column: q.column + column - 1,
            message,
        },
        Error::IndexOutOfRange {
            name,
            dimension,
            line: 1,
            column,
        } => Error::IndexOutOfRange {
            name,
            dimension,
            line: q.line,
            column: q.column + column - 1,
        },
        Error::UnknownIdentifier { name, line: 1, column } => Error::UnknownIdentifier {
            name,
            line: q.line,
            column: q.column + column - 1,
        },
        other => other,
    })
}

impl MetricDefinition {
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut dimension = None;
        let mut metric = None;
        let mut phi = None;
        let mut domain = None;
        let mut params = BTreeMap::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = match raw.find('#') {
                Some(at) => &raw[..at],
                None => raw,
            };
            if content.trim().is_empty() {
                continue;
            }
            let Some(eq) = content.find('=') else {
                return Err(Error::MetricFile {
                    line,
                    message: format!("expected `key = value`, got `{}`", content.trim()),
                });
            };
            let key: Vec<&str> = content[..eq].split_whitespace().collect();
            let value = &content[eq + 1..];
            let value_column = eq + 2;
            match key.as_slice() {
                ["dimension"] => {
                    let n: usize = value.trim().parse().map_err(|_| Error::MetricFile {
                        line,
                        message: format!("dimension must be a positive integer, got `{}`", value.trim()),
                    })?;
                    if n == 0 {
                        return Err(Error::MetricFile {
                            line,
                            message: "dimension must be positive".into(),
                        });
                    }
                    dimension = Some(n);
                }
                ["metric"] => metric = Some(unquote(value, line, value_column)?),
                ["spherical_phi"] => phi = Some(unquote(value, line, value_column)?),
                ["domain"] => domain = Some(unquote(value, line, value_column)?),
                ["param", pname] => {
                    let v: f64 = value.trim().parse().map_err(|_| Error::MetricFile {
                        line,
                        message: format!("parameter `{pname}` needs a real value"),
                    })?;
                    params.insert(pname.to_string(), v);
                }
                _ => {
                    return Err(Error::MetricFile {
                        line,
                        message: format!("unknown key `{}`", content[..eq].trim()),
                    })
                }
            }
        }

        let dimension = dimension.ok_or(Error::MetricFile {
            line: 0,
            message: "missing `dimension = <n>`".into(),
        })?;
        let options = ParseOptions::new(dimension).with_params(params.keys().cloned());
        let source = match (metric, phi) {
            (Some(m), None) => MetricSource::Expression(parse_quoted(&m, &options)?),
            (None, Some(p)) => {
                MetricSource::Spherical(parse_quoted(&p, &spherical_parse_options(params.keys().cloned()))?)
            }
            (Some(_), Some(p)) => {
                return Err(Error::MetricFile {
                    line: p.line,
                    message: "`metric` and `spherical_phi` are mutually exclusive".into(),
                })
            }
            (None, None) => {
                return Err(Error::MetricFile {
                    line: 0,
                    message: "missing `metric = \"...\"` (or `spherical_phi`)".into(),
                })
            }
        };
        let domain = domain.map(|d| parse_quoted(&d, &options)).transpose()?;
        Ok(MetricDefinition {
            name: name.to_string(),
            dimension,
            source,
            params,
            domain,
        })
    }

    /// Serializes back to the file format; `parse(to_file_text())` reproduces
    /// the definition.
    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.name);
        let _ = writeln!(out, "dimension = {}", self.dimension);
        for (k, v) in &self.params {
            let _ = writeln!(out, "param {k} = {v}");
        }
        match &self.source {
            MetricSource::Expression(e) => {
                let _ = writeln!(out, "metric = \"{e}\"");
            }
            MetricSource::Spherical(phi) => {
                let names: BTreeMap<Var, Expr> = [(Var::x(1), Expr::param("r")), (Var::y(1), Expr::param("s"))]
                    .into_iter()
                    .collect();
                let text = super::substitute(phi, &names, 1).map_or_else(|_| phi.to_string(), |e| e.to_string());
                let _ = writeln!(out, "spherical_phi = \"{text}\"");
            }
        }
        if let Some(d) = &self.domain {
            let _ = writeln!(out, "domain = \"{d}\"");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RANDERS: &str = r#"
# Randers-type metric
dimension = 2
param c = 1
param a1 = 0.1
metric = "c*sqrt(y1^2+y2^2) + (a1 + x1)*y1 + x2*y2"   # trailing comment
domain="1 - x1^2 - x2^2"
"#;

    #[test]
    fn parses_all_keys() {
        let def = MetricDefinition::parse("randers", RANDERS).unwrap();
        assert_eq!(def.dimension, 2);
        assert_eq!(def.params.get("c"), Some(&1.0));
        assert_eq!(def.params.get("a1"), Some(&0.1));
        assert!(def.domain.is_some());
        assert!(matches!(def.source, MetricSource::Expression(_)));
    }

    #[test]
    fn export_round_trips() {
        let def = MetricDefinition::parse("randers", RANDERS).unwrap();
        let again = MetricDefinition::parse("randers", &def.to_file_text()).unwrap();
        assert_eq!(def, again);
    }

    #[test]
    fn spherical_profile_uses_r_and_s() {
        let text = "dimension = 3\nparam k = 1\nspherical_phi = \"1/k + s/4 + r^2\"\n";
        let def = MetricDefinition::parse("sph", text).unwrap();
        match &def.source {
            MetricSource::Spherical(phi) => assert_eq!(phi.to_string(), "1/k + y1/4 + x1^2"),
            other => panic!("{other:?}"),
        }
        let again = MetricDefinition::parse("sph", &def.to_file_text()).unwrap();
        assert_eq!(def, again);
    }

    #[test]
    fn syntax_errors_carry_file_location() {
        let text = "dimension = 2\nmetric = \"sqrt(y1^2 + * y2)\"\n";
        match MetricDefinition::parse("bad", text) {
            Err(Error::Syntax { line, column, .. }) => assert_eq!((line, column), (2, 23)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn undeclared_parameter_is_unknown() {
        let text = "dimension = 1\nmetric = \"c*y1\"\n";
        assert!(matches!(
            MetricDefinition::parse("bad", text),
            Err(Error::UnknownIdentifier { line: 2, .. })
        ));
    }

    #[test]
    fn structural_errors() {
        assert!(MetricDefinition::parse("m", "metric = \"y1\"").is_err());
        assert!(MetricDefinition::parse("m", "dimension = 0\nmetric = \"y1\"").is_err());
        assert!(MetricDefinition::parse("m", "dimension = 1\nmetric = y1").is_err());
        assert!(MetricDefinition::parse("m", "dimension = 1\ncolour = \"y1\"").is_err());
    }
}
