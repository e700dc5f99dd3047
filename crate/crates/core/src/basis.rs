//! Term formulas: `x1 + x2 + x1^2 + x1:x2 + I(age >= 60)`.
//!
//! Terms are separated by `+`. A term is a variable name, an integer power
//! `name^k` with `k >= 2`, a pairwise interaction `a:b`, or an indicator
//! `I(name REL value)` with `REL` one of `<`, `<=`, `>`, `>=`, `==`.
//! Whitespace is ignored. Interactions are stored with their names sorted.

use std::collections::HashSet;

use nalgebra::DMatrix;

use crate::data::{Relation, SourceDataset, TermExpr};
use crate::error::{Error, Result};

/// A parsed formula together with the text it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TermFormula {
    pub source_text: String,
    pub parsed: Vec<TermExpr>,
}

impl TermFormula {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self {
            source_text: text.to_string(),
            parsed: parse_terms(text)?,
        })
    }

    /// Canonical text, `a + b + ...`.
    pub fn render(&self) -> String {
        render_terms(&self.parsed)
    }
}

pub fn render_terms(terms: &[TermExpr]) -> String {
    terms
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" + ")
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Syntax {
            offset,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        match self.peek() {
            Some(b) if b == c => {
                self.pos += 1;
                Ok(())
            }
            Some(b) => self.err(
                self.pos,
                format!("expected `{}`, found `{}`", c as char, b as char),
            ),
            None => self.err(
                self.pos,
                format!("expected `{}`, found end of input", c as char),
            ),
        }
    }

    fn name(&mut self) -> Result<String> {
        self.skip_ws();
        let start = self.pos;
        match self.src.get(self.pos) {
            Some(b) if b.is_ascii_alphabetic() || *b == b'_' || *b == b'.' => {}
            Some(b) => {
                return self.err(
                    start,
                    format!("expected variable name, found `{}`", *b as char),
                )
            }
            None => return self.err(start, "expected variable name, found end of input"),
        }
        while let Some(b) = self.src.get(self.pos) {
            if b.is_ascii_alphanumeric() || *b == b'_' || *b == b'.' {
                self.pos += 1;
            } else {
                break;
            }
        }
        Ok(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn integer(&mut self) -> Result<(usize, u32)> {
        self.skip_ws();
        let start = self.pos;
        while self.src.get(self.pos).is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err(start, "expected integer exponent");
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        match text.parse::<u32>() {
            Ok(k) => Ok((start, k)),
            Err(_) => self.err(start, "exponent out of range"),
        }
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        while let Some(b) = self.src.get(self.pos) {
            if b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E') {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => self.err(start, format!("invalid number `{text}`")),
        }
    }

    fn relation(&mut self) -> Result<Relation> {
        self.skip_ws();
        let start = self.pos;
        let two = self.src.get(self.pos..self.pos + 2);
        let (rel, len) = match two {
            Some(b"<=") => (Relation::Le, 2),
            Some(b">=") => (Relation::Ge, 2),
            Some(b"==") => (Relation::Eq, 2),
            _ => match self.src.get(self.pos) {
                Some(b'<') => (Relation::Lt, 1),
                Some(b'>') => (Relation::Gt, 1),
                _ => return self.err(start, "expected comparison (<, <=, >, >=, ==)"),
            },
        };
        self.pos += len;
        Ok(rel)
    }

    fn term(&mut self) -> Result<TermExpr> {
        let name = self.name()?;
        if name == "I" && self.peek() == Some(b'(') {
            self.pos += 1;
            let var = self.name()?;
            let relation = self.relation()?;
            let threshold = self.number()?;
            self.expect(b')')?;
            return Ok(TermExpr::Indicator {
                name: var,
                relation,
                threshold,
            });
        }
        match self.peek() {
            Some(b'^') => {
                self.pos += 1;
                let (at, k) = self.integer()?;
                if k < 2 {
                    return self.err(
                        at,
                        format!("exponent must be >= 2 (write `{name}` or omit)"),
                    );
                }
                Ok(TermExpr::Power(name, k))
            }
            Some(b':') => {
                let at = self.pos;
                self.pos += 1;
                let other = self.name()?;
                if other == name {
                    return self.err(at, "interaction of a variable with itself (use `^2`)");
                }
                Ok(TermExpr::interaction(&name, &other))
            }
            _ => Ok(TermExpr::Var(name)),
        }
    }
}

/// Parse a `+`-separated term list. Rejects duplicate terms after normalization.
pub fn parse_terms(spec: &str) -> Result<Vec<TermExpr>> {
    let mut p = Parser {
        src: spec.as_bytes(),
        pos: 0,
    };
    if p.peek().is_none() {
        return p.err(0, "empty formula");
    }
    let mut terms = Vec::new();
    let mut seen = HashSet::new();
    loop {
        let t = p.term()?;
        let label = t.to_string();
        if !seen.insert(label.clone()) {
            return Err(Error::DuplicateTerm(label));
        }
        terms.push(t);
        match p.peek() {
            None => break,
            Some(b'+') => p.pos += 1,
            Some(b) => return p.err(p.pos, format!("unexpected `{}`", b as char)),
        }
    }
    Ok(terms)
}

fn column_index(data: &SourceDataset, name: &str) -> Result<usize> {
    data.var_names()
        .iter()
        .position(|v| v == name)
        .ok_or_else(|| Error::UnknownVariable(name.to_string()))
}

/// Materialize `t_j(x_i)` row by row into an `n × K` matrix.
pub fn evaluate_basis(terms: &[TermExpr], data: &SourceDataset) -> Result<DMatrix<f64>> {
    let n = data.n();
    let x = data.x();
    let mut out = DMatrix::zeros(n, terms.len());
    for (j, term) in terms.iter().enumerate() {
        match term {
            TermExpr::Var(a) => {
                let c = column_index(data, a)?;
                out.column_mut(j).copy_from(&x.column(c));
            }
            TermExpr::Power(a, k) => {
                let c = column_index(data, a)?;
                for i in 0..n {
                    out[(i, j)] = x[(i, c)].powi(*k as i32);
                }
            }
            TermExpr::Interaction(a, b) => {
                let (ca, cb) = (column_index(data, a)?, column_index(data, b)?);
                for i in 0..n {
                    out[(i, j)] = x[(i, ca)] * x[(i, cb)];
                }
            }
            TermExpr::Indicator {
                name,
                relation,
                threshold,
            } => {
                let c = column_index(data, name)?;
                for i in 0..n {
                    out[(i, j)] = if relation.holds(x[(i, c)], *threshold) {
                        1.0
                    } else {
                        0.0
                    };
                }
            }
            TermExpr::Intercept => out.column_mut(j).fill(1.0),
        }
        if let Some(i) = (0..n).find(|&i| !out[(i, j)].is_finite()) {
            return Err(Error::NonFiniteBasis {
                row: i,
                term: term.to_string(),
            });
        }
    }
    Ok(out)
}
