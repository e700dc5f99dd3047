//! Domain types shared by the estimators.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::parse_terms;
use crate::error::{Error, Result};
use crate::numerics::{normal_quantile, SolveReport};

/// Individual-level source sample: outcome `y` and an `n × d` covariate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDataset {
    y: Vec<f64>,
    x: DMatrix<f64>,
    var_names: Vec<String>,
}

impl SourceDataset {
    pub fn new(y: Vec<f64>, x: DMatrix<f64>, var_names: Vec<String>) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 rows, got {n}"
            )));
        }
        if x.nrows() != n {
            return Err(Error::InvalidDataset(format!(
                "outcome has {n} rows but covariates have {}",
                x.nrows()
            )));
        }
        if x.ncols() != var_names.len() {
            return Err(Error::InvalidDataset(format!(
                "{} covariate columns but {} names",
                x.ncols(),
                var_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &var_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate variable name `{name}`"
                )));
            }
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "non-finite outcome in row {i}"
            )));
        }
        if let Some(idx) = x.iter().position(|v| !v.is_finite()) {
            let (r, c) = (idx % n, idx / n);
            return Err(Error::InvalidDataset(format!(
                "non-finite covariate `{}` in row {r}",
                var_names[c]
            )));
        }
        Ok(Self { y, x, var_names })
    }

    /// Build from row-major covariate rows.
    pub fn from_rows(y: Vec<f64>, rows: &[Vec<f64>], var_names: &[&str]) -> Result<Self> {
        let d = var_names.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidDataset("ragged covariate rows".into()));
        }
        let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Self::new(y, x, var_names.iter().map(|s| s.to_string()).collect())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    pub fn column(&self, name: &str) -> Option<nalgebra::DVectorView<'_, f64>> {
        let j = self.var_names.iter().position(|v| v == name)?;
        Some(self.x.column(j))
    }

    pub fn mean_y(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.n() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

impl Relation {
    pub fn symbol(self) -> &'static str {
        match self {
            Relation::Lt => "<",
            Relation::Le => "<=",
            Relation::Gt => ">",
            Relation::Ge => ">=",
            Relation::Eq => "==",
        }
    }

    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Relation::Lt => lhs < rhs,
            Relation::Le => lhs <= rhs,
            Relation::Gt => lhs > rhs,
            Relation::Ge => lhs >= rhs,
            Relation::Eq => lhs == rhs,
        }
    }
}

/// One component of a basis or shift-model design.
#[derive(Debug, Clone, PartialEq)]
pub enum TermExpr {
    Var(String),
    Power(String, u32),
    /// Always stored with the two names in lexicographic order.
    Interaction(String, String),
    Indicator {
        name: String,
        relation: Relation,
        threshold: f64,
    },
    Intercept,
}

impl TermExpr {
    /// Interaction with the names put in canonical order.
    pub fn interaction(a: &str, b: &str) -> Self {
        if a <= b {
            TermExpr::Interaction(a.to_string(), b.to_string())
        } else {
            TermExpr::Interaction(b.to_string(), a.to_string())
        }
    }

    pub fn var(name: &str) -> Self {
        TermExpr::Var(name.to_string())
    }

    /// Variable names this term reads.
    pub fn names(&self) -> Vec<&str> {
        match self {
            TermExpr::Var(a) | TermExpr::Power(a, _) => vec![a],
            TermExpr::Interaction(a, b) => vec![a, b],
            TermExpr::Indicator { name, .. } => vec![name],
            TermExpr::Intercept => vec![],
        }
    }
}

impl fmt::Display for TermExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TermExpr::Var(a) => write!(f, "{a}"),
            TermExpr::Power(a, k) => write!(f, "{a}^{k}"),
            TermExpr::Interaction(a, b) => write!(f, "{a}:{b}"),
            TermExpr::Indicator {
                name,
                relation,
                threshold,
            } => write!(f, "I({name}{}{threshold})", relation.symbol()),
            TermExpr::Intercept => write!(f, "1"),
        }
    }
}

fn check_terms(terms: &[TermExpr], what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for t in terms {
        if matches!(t, TermExpr::Intercept) {
            return Err(Error::InvalidModel(format!(
                "{what} may not contain an intercept term"
            )));
        }
        if let TermExpr::Interaction(a, b) = t {
            if a >= b {
                return Err(Error::InvalidModel(format!(
                    "interaction `{a}:{b}` is not in canonical order or repeats a variable"
                )));
            }
        }
        if let TermExpr::Power(_, k) = t {
            if *k < 2 {
                return Err(Error::InvalidModel(format!(
                    "power term `{t}` needs exponent >= 2"
                )));
            }
        }
        if !seen.insert(t.to_string()) {
            return Err(Error::DuplicateTerm(t.to_string()));
        }
    }
    Ok(())
}

/// The basis `Φ(x)` whose target moments are reported.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    terms: Vec<TermExpr>,
}

impl BasisSpec {
    pub fn new(terms: Vec<TermExpr>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidModel("basis needs at least one term".into()));
        }
        check_terms(&terms, "basis")?;
        Ok(Self { terms })
    }

    pub fn parse(spec: &str) -> Result<Self> {
        Self::new(parse_terms(spec)?)
    }

    pub fn terms(&self) -> &[TermExpr] {
        &self.terms
    }

    pub fn k(&self) -> usize {
        self.terms.len()
    }

    pub fn labels(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.to_string()).collect()
    }
}

/// Log-linear covariate-shift model `log π(x; α) = α₀ + Σ_j α_j t_j(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftModel {
    terms: Vec<TermExpr>,
}

impl ShiftModel {
    pub fn new(terms: Vec<TermExpr>) -> Result<Self> {
        check_terms(&terms, "shift model")?;
        Ok(Self { terms })
    }

    pub fn parse(spec: &str) -> Result<Self> {
        Self::new(parse_terms(spec)?)
    }

    pub fn terms(&self) -> &[TermExpr] {
        &self.terms
    }

    /// Intercept plus one coefficient per term.
    pub fn d_alpha(&self) -> usize {
        1 + self.terms.len()
    }

    /// Identifiability requires `d_alpha ≤ K + 1`.
    pub fn check_against(&self, basis: &BasisSpec) -> Result<()> {
        if self.d_alpha() > basis.k() + 1 {
            return Err(Error::InvalidModel(format!(
                "shift model has {} parameters but only {} moment conditions",
                self.d_alpha(),
                basis.k() + 1
            )));
        }
        Ok(())
    }
}

/// Target sample moments `φ̂*` of the basis, labelled term by term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub phi_hat: Vec<f64>,
    pub m: usize,
    pub term_labels: Vec<String>,
}

impl TargetSummary {
    pub fn new(phi_hat: Vec<f64>, m: usize, term_labels: Vec<String>) -> Result<Self> {
        if m < 2 {
            return Err(Error::Schema(format!(
                "target sample size m must be >= 2, got {m}"
            )));
        }
        if phi_hat.len() != term_labels.len() {
            return Err(Error::Schema(format!(
                "{} moments for {} terms",
                phi_hat.len(),
                term_labels.len()
            )));
        }
        if phi_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("non-finite target moment".into()));
        }
        Ok(Self {
            phi_hat,
            m,
            term_labels,
        })
    }

    /// Summary for `basis` with labels taken from its canonical rendering.
    pub fn for_basis(basis: &BasisSpec, phi_hat: Vec<f64>, m: usize) -> Result<Self> {
        Self::new(phi_hat, m, basis.labels())
    }

    pub fn k(&self) -> usize {
        self.phi_hat.len()
    }
}

/// A basis and summary whose terms are known to line up.
#[derive(Debug, Clone, Copy)]
pub struct CheckedPairing<'a> {
    pub basis: &'a BasisSpec,
    pub summary: &'a TargetSummary,
}

pub fn validate_pairing<'a>(
    basis: &'a BasisSpec,
    summary: &'a TargetSummary,
) -> Result<CheckedPairing<'a>> {
    let expected = basis.labels();
    for (i, exp) in expected.iter().enumerate() {
        let Some(label) = summary.term_labels.get(i) else {
            return Err(Error::SummaryMismatch {
                position: i,
                expected: exp.clone(),
                found: "<missing>".into(),
            });
        };
        let canonical = match parse_terms(label) {
            Ok(t) if t.len() == 1 => t[0].to_string(),
            _ => label.clone(),
        };
        if &canonical != exp {
            return Err(Error::SummaryMismatch {
                position: i,
                expected: exp.clone(),
                found: label.clone(),
            });
        }
    }
    if summary.term_labels.len() > expected.len() || summary.phi_hat.len() != expected.len() {
        let i = expected.len();
        return Err(Error::SummaryMismatch {
            position: i,
            expected: "<end of basis>".into(),
            found: summary
                .term_labels
                .get(i)
                .cloned()
                .unwrap_or_else(|| "<extra moment>".into()),
        });
    }
    Ok(CheckedPairing { basis, summary })
}

/// Weight diagnostics reported alongside every estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub grad_norm: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    /// Effective sample size `1/Σ w_i²` of the normalized weights.
    pub ess: f64,
}

impl Diagnostics {
    pub fn from_weights(weights: &[f64], report: &SolveReport) -> Self {
        let total: f64 = weights.iter().sum();
        let sq: f64 = weights.iter().map(|w| (w / total) * (w / total)).sum();
        Self {
            iterations: report.iterations,
            grad_norm: report.final_grad_norm,
            weight_min: weights.iter().copied().fold(f64::INFINITY, f64::min),
            weight_max: weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ess: 1.0 / sq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimate: f64,
    pub se: f64,
    pub ci95: [f64; 2],
    pub n: usize,
    pub m: usize,
    pub method: String,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    pub fn new(
        estimate: f64,
        se: f64,
        n: usize,
        m: usize,
        method: &str,
        diagnostics: Diagnostics,
    ) -> Self {
        let z = normal_quantile(0.975);
        Self {
            estimate,
            se,
            ci95: [estimate - z * se, estimate + z * se],
            n,
            m,
            method: method.to_string(),
            diagnostics,
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci95[0] <= value && value <= self.ci95[1]
    }
}

/// Entropy-balancing fit.
#[derive(Debug, Clone, PartialEq)]
pub struct EbFit {
    /// Multipliers `λ̂` on the original basis scale.
    pub lambda: DVector<f64>,
    /// Weights `p̂_i`, summing to one.
    pub p: Vec<f64>,
    pub mu: f64,
    pub sigma_eb: DMatrix<f64>,
    pub omega: DVector<f64>,
    pub sigma2: f64,
    pub se: f64,
    pub report: SolveReport,
}

/// Fit of the flexible model-based reweighting estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexFit {
    /// Multipliers `η̂` (length K+1) on the original basis scale.
    pub eta: DVector<f64>,
    pub alpha: DVector<f64>,
    /// Optimized summary `φ̂`.
    pub phi: DVector<f64>,
    pub q: Vec<f64>,
    pub alpha0_init: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    pub sigma_upd: DMatrix<f64>,
    pub mu: f64,
    pub sigma2: f64,
    pub se: f64,
    /// `σ̂²_w`, the variance of `π̂ y` before the moment-based reduction.
    pub sigma2_w: f64,
    /// Set when the plug-in reduction term came out negative.
    pub variance_reduction_negative: bool,
    pub report: SolveReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckResult {
    #[serde(rename = "T")]
    pub t: f64,
    pub df: usize,
    pub p_value: f64,
}
