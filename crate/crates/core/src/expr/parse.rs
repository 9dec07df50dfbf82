use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::{Expr, Var, VarKind};
use crate::error::{Error, Result};

/// Controls how identifiers are resolved.
#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub dimension: usize,
    /// Names accepted as parameters. `None` accepts any identifier.
    pub params: Option<BTreeSet<String>>,
    /// Extra names that resolve to chart variables (e.g. `r -> x1`).
    pub aliases: BTreeMap<String, Var>,
}

impl ParseOptions {
    /// Strict options: only `x1..xn`, `y1..yn` and `sqrt` are known.
    pub fn new(dimension: usize) -> Self {
        ParseOptions {
            dimension,
            params: Some(BTreeSet::new()),
            aliases: BTreeMap::new(),
        }
    }

    pub fn with_params<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set = self.params.get_or_insert_with(BTreeSet::new);
        set.extend(names.into_iter().map(Into::into));
        self
    }

    pub fn any_params(mut self) -> Self {
        self.params = None;
        self
    }

    pub fn with_alias(mut self, name: &str, var: Var) -> Self {
        self.aliases.insert(name.to_string(), var);
        self
    }
}

/// Parses `text` as an expression over the chart of the given dimension.
pub fn parse_metric(text: &str, dimension: usize) -> Result<Expr> {
    parse_with(text, &ParseOptions::new(dimension))
}

pub fn parse_with(text: &str, options: &ParseOptions) -> Result<Expr> {
    let tokens = tokenize(text)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        options,
    };
    let e = parser.expr()?;
    match parser.peek() {
        Tok::End => Ok(e),
        _ => Err(parser.error("unexpected trailing input")),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut line, mut column) = (1, 1);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, column);
        if c == '\n' {
            line += 1;
            column = 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            column += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part, only if followed by digits
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let lexeme: String = chars[start..i].iter().collect();
            let value = lexeme.parse::<f64>().map_err(|_| Error::Syntax {
                line: tl,
                column: tc,
                message: format!("malformed number `{lexeme}`"),
            })?;
            out.push(Token {
                tok: Tok::Num(value),
                line: tl,
                column: tc,
            });
        } else if c.is_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                line: tl,
                column: tc,
            });
        } else if "+-*/^()".contains(c) {
            i += 1;
            out.push(Token {
                tok: Tok::Op(c),
                line: tl,
                column: tc,
            });
        } else {
            return Err(Error::Syntax {
                line: tl,
                column: tc,
                message: format!("unexpected character `{c}`"),
            });
        }
        column += i - start;
    }
    out.push(Token {
        tok: Tok::End,
        line,
        column,
    });
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    options: &'a ParseOptions,
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn advance(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, message: &str) -> Error {
        let t = &self.tokens[self.pos];
        let found = match &t.tok {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Op(c) => format!("`{c}`"),
            Tok::End => "end of input".to_string(),
        };
        Error::Syntax {
            line: t.line,
            column: t.column,
            message: format!("{message} (found {found})"),
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.peek() == &Tok::Op(c) {
            self.advance();
            Ok(())
        } else {
            Err(self.error(&format!("expected `{c}`")))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Tok::Op(op @ ('+' | '-')) = *self.peek() {
            self.advance();
            let rhs = self.term()?;
            lhs = fold(if op == '+' { lhs + rhs } else { lhs - rhs });
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Tok::Op(op @ ('*' | '/')) = *self.peek() {
            self.advance();
            let rhs = self.unary()?;
            lhs = fold(if op == '*' { lhs * rhs } else { lhs / rhs });
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek() == &Tok::Op('-') {
            self.advance();
            let inner = self.unary()?;
            return Ok(fold(-inner));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.primary()?;
        if self.peek() != &Tok::Op('^') {
            return Ok(base);
        }
        self.advance();
        let at = self.pos;
        let exponent = self.unary()?;
        match exponent {
            Expr::Num(p) if p.is_finite() => Ok(fold(base.powf(p))),
            _ => {
                self.pos = at;
                Err(self.error("exponent must be a numeric constant"))
            }
        }
    }

    fn primary(&mut self) -> Result<Expr> {
        let token = self.advance();
        match token.tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::Op('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if self.peek() == &Tok::Op('(') {
                    if name != "sqrt" {
                        return Err(Error::UnknownIdentifier {
                            name,
                            line: token.line,
                            column: token.column,
                        });
                    }
                    self.advance();
                    let arg = self.expr()?;
                    self.expect(')')?;
                    return Ok(fold(arg.sqrt()));
                }
                self.identifier(name, token.line, token.column)
            }
            Tok::End => {
                self.pos = self.tokens.len() - 1;
                Err(self.error("unexpected end of input"))
            }
            Tok::Op(_) => {
                self.pos -= 1;
                Err(self.error("expected a number, variable or `(`"))
            }
        }
    }

    fn identifier(&self, name: String, line: usize, column: usize) -> Result<Expr> {
        if let Some(v) = self.options.aliases.get(&name) {
            return Ok(Expr::Var(*v));
        }
        if let Some(var) = chart_variable(&name) {
            if var.index == 0 || var.index > self.options.dimension {
                return Err(Error::IndexOutOfRange {
                    name,
                    dimension: self.options.dimension,
                    line,
                    column,
                });
            }
            return Ok(Expr::Var(var));
        }
        let known = match &self.options.params {
            None => name != "sqrt",
            Some(set) => set.contains(&name),
        };
        if known {
            Ok(Expr::Param(Arc::from(name.as_str())))
        } else {
            Err(Error::UnknownIdentifier { name, line, column })
        }
    }
}

fn chart_variable(name: &str) -> Option<Var> {
    let kind = match name.as_bytes().first()? {
        b'x' => VarKind::Position,
        b'y' => VarKind::Fiber,
        _ => return None,
    };
    let digits = &name[1..];
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some(Var {
        kind,
        index: digits.parse().ok()?,
    })
}

/// Constant folding of a freshly built node whose children are already folded.
fn fold(e: Expr) -> Expr {
    let folded = match &e {
        Expr::Neg(a) => a.as_num().map(|v| -v),
        Expr::Add(a, b) => a.as_num().zip(b.as_num()).map(|(a, b)| a + b),
        Expr::Sub(a, b) => a.as_num().zip(b.as_num()).map(|(a, b)| a - b),
        Expr::Mul(a, b) => a.as_num().zip(b.as_num()).map(|(a, b)| a * b),
        Expr::Div(a, b) => a
            .as_num()
            .zip(b.as_num())
            .filter(|(_, b)| *b != 0.0)
            .map(|(a, b)| a / b),
        Expr::Sqrt(a) => a.as_num().filter(|v| *v >= 0.0).map(f64::sqrt),
        Expr::Pow(a, p) => a.as_num().and_then(|v| {
            let r = v.powf(*p);
            r.is_finite().then_some(r)
        }),
        _ => None,
    };
    folded.map(Expr::Num).unwrap_or(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pow(e: Expr, p: f64) -> Expr {
        e.powf(p)
    }

    #[test]
    fn parses_euclidean_norm_into_expected_tree() {
        let e = parse_metric("sqrt(y1^2+y2^2)", 2).unwrap();
        let expected = (pow(Expr::y(1), 2.0) + pow(Expr::y(2), 2.0)).sqrt();
        assert_eq!(e, expected);
    }

    #[test]
    fn parses_quartic_root_metric() {
        let e = parse_metric("sqrt(sqrt(y1^4+y2^4+y3^4)+x4*y4^2)", 4).unwrap();
        let quartic = pow(Expr::y(1), 4.0) + pow(Expr::y(2), 4.0) + pow(Expr::y(3), 4.0);
        let expected = (quartic.sqrt() + Expr::x(4) * pow(Expr::y(4), 2.0)).sqrt();
        assert_eq!(e, expected);
    }

    #[test]
    fn rejects_out_of_range_index() {
        match parse_metric("y3^2", 2) {
            Err(Error::IndexOutOfRange {
                name,
                dimension,
                line,
                column,
            }) => {
                assert_eq!((name.as_str(), dimension, line, column), ("y3", 2, 1, 1));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_metric("x0", 2), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn reports_syntax_error_location() {
        match parse_metric("y1 +\n  * y2", 2) {
            Err(Error::Syntax { line, column, .. }) => assert_eq!((line, column), (2, 3)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_metric("(y1 + y2", 2), Err(Error::Syntax { .. })));
        assert!(matches!(parse_metric("y1 $ y2", 2), Err(Error::Syntax { .. })));
    }

    #[test]
    fn unknown_identifiers_and_functions() {
        assert!(matches!(parse_metric("c*y1", 1), Err(Error::UnknownIdentifier { .. })));
        assert!(matches!(
            parse_metric("sin(y1)", 1),
            Err(Error::UnknownIdentifier { .. })
        ));
        let opts = ParseOptions::new(1).any_params();
        assert_eq!(parse_with("c*y1", &opts).unwrap(), Expr::param("c") * Expr::y(1));
    }

    #[test]
    fn exponent_must_be_constant() {
        let opts = ParseOptions::new(2).with_params(["p"]);
        assert!(matches!(parse_with("y1^p", &opts), Err(Error::Syntax { .. })));
        assert!(matches!(parse_metric("y1^y2", 2), Err(Error::Syntax { .. })));
        assert_eq!(parse_metric("y1^(1/3)", 2).unwrap(), pow(Expr::y(1), 1.0 / 3.0));
        assert_eq!(parse_metric("y1^-2", 2).unwrap(), pow(Expr::y(1), -2.0));
    }

    #[test]
    fn folds_constants_only() {
        assert_eq!(parse_metric("2*3 + 1", 1).unwrap(), Expr::Num(7.0));
        assert_eq!(parse_metric("-(4)", 1).unwrap(), Expr::Num(-4.0));
        assert_eq!(parse_metric("0*y1", 1).unwrap(), Expr::Num(0.0) * Expr::y(1));
        assert_eq!(parse_metric("1.5e-3", 1).unwrap(), Expr::Num(1.5e-3));
    }

    #[test]
    fn aliases_resolve_to_chart_variables() {
        let opts = ParseOptions::new(1)
            .with_alias("r", Var::x(1))
            .with_alias("s", Var::y(1));
        assert_eq!(parse_with("r*s", &opts).unwrap(), Expr::x(1) * Expr::y(1));
    }
}
