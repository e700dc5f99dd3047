//! Monte Carlo harness for the covariate-shift superpopulation design.
//!
//! Units `(Y†, X†)` are drawn from a superpopulation and assigned to the target
//! with probability `Δ(X†)`, so that `w(x) ∝ Δ(x)/{1 − Δ(x)}`. Source and target
//! samples are filled by quota sampling.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::evaluate_basis;
use crate::data::{BasisSpec, ShiftModel, SourceDataset, TargetSummary};
use crate::eb::eb_estimate;
use crate::error::{Error, Result};
use crate::flex::flex_estimate;
use crate::model_check::specification_test;
use crate::numerics::normal_quantile;

pub const VAR_NAMES: [&str; 3] = ["x1", "x2", "x3"];
pub const DEFAULT_BASIS: &str = "x1 + x2 + x3 + x1^2";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "i")]
    I,
    #[serde(rename = "ii")]
    II,
    #[serde(rename = "iii")]
    III,
    #[serde(rename = "iv")]
    IV,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::I, Scenario::II, Scenario::III, Scenario::IV];

    pub fn id(self) -> &'static str {
        match self {
            Scenario::I => "i",
            Scenario::II => "ii",
            Scenario::III => "iii",
            Scenario::IV => "iv",
        }
    }

    /// `logit Δ(x)`.
    pub fn membership_logit(self, x1: f64, x2: f64, x3: f64) -> f64 {
        match self {
            Scenario::I => 0.2 * x1 + 0.2 * x2 + 0.2 * x3 + 0.2 * x1 * x1,
            Scenario::II => 0.4 * x1,
            Scenario::III => 0.2 * x1 + 0.2 * x2 - 0.3 * x1 * x2,
            Scenario::IV => 0.2 * x1 + 0.2 * x2 - 0.4 * x1 * x2,
        }
    }

    /// Shift model that is correctly specified for this scenario.
    pub fn default_model(self) -> &'static str {
        match self {
            Scenario::I => "x1 + x2 + x3 + x1^2",
            Scenario::II => "x1",
            Scenario::III | Scenario::IV => "x1 + x2 + x1:x2",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.id() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::InvalidDataset(format!(
                    "unknown scenario `{s}` (expected i, ii, iii or iv)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

impl OutcomeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Continuous => "continuous",
            OutcomeKind::Binary => "binary",
        }
    }

    /// `E(Y† | X† = x)`.
    pub fn mean(self, x1: f64, x2: f64, x3: f64) -> f64 {
        let g = outcome_linear_predictor(x1, x2, x3);
        match self {
            OutcomeKind::Continuous => g,
            OutcomeKind::Binary => expit(g),
        }
    }
}

impl fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutcomeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "continuous" => Ok(OutcomeKind::Continuous),
            "binary" => Ok(OutcomeKind::Binary),
            _ => Err(Error::InvalidDataset(format!(
                "unknown outcome kind `{s}` (expected continuous or binary)"
            ))),
        }
    }
}

pub fn expit(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `g(x) = x₁ + x₂ + x₃ − 4x₁x₂ − 2`.
pub fn outcome_linear_predictor(x1: f64, x2: f64, x3: f64) -> f64 {
    x1 + x2 + x3 - 4.0 * x1 * x2 - 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub scenario: Scenario,
    pub outcome: OutcomeKind,
    pub n: usize,
    pub m: usize,
    pub reps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuperpopUnit {
    pub y: f64,
    pub x: [f64; 3],
    /// `true` for the target population.
    pub delta: bool,
}

fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

pub fn draw_superpop_unit<R: Rng + ?Sized>(
    scenario: Scenario,
    outcome: OutcomeKind,
    rng: &mut R,
) -> SuperpopUnit {
    let x1: f64 = rng.sample(StandardNormal);
    let x2 = if bernoulli(rng, expit(-2.0 * x1)) {
        1.0
    } else {
        0.0
    };
    let x3 = if bernoulli(rng, expit(x1)) { 1.0 } else { 0.0 };
    let g = outcome_linear_predictor(x1, x2, x3);
    let y = match outcome {
        OutcomeKind::Continuous => g + rng.sample::<f64, _>(StandardNormal),
        OutcomeKind::Binary => {
            if bernoulli(rng, expit(g)) {
                1.0
            } else {
                0.0
            }
        }
    };
    let delta = bernoulli(rng, expit(scenario.membership_logit(x1, x2, x3)));
    SuperpopUnit {
        y,
        x: [x1, x2, x3],
        delta,
    }
}

/// One simulated study: the source microdata and the target covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub source: SourceDataset,
    /// Target covariates, `m × 3`.
    pub target_x: DMatrix<f64>,
}

impl Study {
    /// Target sample means of the basis functions.
    pub fn target_summary(&self, basis: &BasisSpec) -> Result<TargetSummary> {
        let m = self.target_x.nrows();
        let target = SourceDataset::new(
            vec![0.0; m],
            self.target_x.clone(),
            VAR_NAMES.iter().map(|s| s.to_string()).collect(),
        )?;
        let b = evaluate_basis(basis.terms(), &target)?;
        let phi = (0..b.ncols())
            .map(|j| b.column(j).sum() / m as f64)
            .collect();
        TargetSummary::for_basis(basis, phi, m)
    }
}

/// Quota sampling: draw units until `n` source and `m` target units have been
/// collected, discarding the surplus of whichever stratum fills first.
pub fn gen_study<R: Rng + ?Sized>(
    scenario: Scenario,
    outcome: OutcomeKind,
    n: usize,
    m: usize,
    rng: &mut R,
) -> Result<Study> {
    if n < 2 {
        return Err(Error::InvalidDataset(format!(
            "source quota must be at least 2, got {n}"
        )));
    }
    let mut y = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(3 * n);
    let mut xt = Vec::with_capacity(3 * m);
    let (mut ns, mut nt) = (0, 0);
    while ns < n || nt < m {
        let u = draw_superpop_unit(scenario, outcome, rng);
        if u.delta {
            if nt < m {
                xt.extend_from_slice(&u.x);
                nt += 1;
            }
        } else if ns < n {
            y.push(u.y);
            xs.extend_from_slice(&u.x);
            ns += 1;
        }
    }
    let source = SourceDataset::new(
        y,
        DMatrix::from_row_slice(n, 3, &xs),
        VAR_NAMES.iter().map(|s| s.to_string()).collect(),
    )?;
    Ok(Study {
        source,
        target_x: DMatrix::from_row_slice(m, 3, &xt),
    })
}

/// `E[Δ(X) m(X) | X₁ = x₁]` and `E[Δ(X) | X₁ = x₁]`, summing over the binary
/// covariates.
fn conditional_target_moments(scenario: Scenario, outcome: OutcomeKind, x1: f64) -> (f64, f64) {
    let p2 = expit(-2.0 * x1);
    let p3 = expit(x1);
    let mut num = 0.0;
    let mut den = 0.0;
    for (x2, w2) in [(0.0, 1.0 - p2), (1.0, p2)] {
        for (x3, w3) in [(0.0, 1.0 - p3), (1.0, p3)] {
            let d = expit(scenario.membership_logit(x1, x2, x3)) * w2 * w3;
            num += d * outcome.mean(x1, x2, x3);
            den += d;
        }
    }
    (num, den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuStar {
    pub value: f64,
    /// Monte Carlo standard error of `value`.
    pub se: f64,
}

pub const ORACLE_DRAWS: usize = 10_000_000;
const ORACLE_SEED: u64 = 0x6d75_7374_6172;
const ORACLE_BATCHES: u64 = 100;

/// `μ* = E(Y† | δ = 1) = E{Δ(X) m(X)} / E{Δ(X)}`, estimated as a ratio of
/// means over `draws` draws of `X₁` split into independent batches. Within a
/// batch `X₁` is stratified on its quantiles; the SE is the batch-to-batch
/// spread.
pub fn mu_star_oracle(scenario: Scenario, outcome: OutcomeKind, draws: usize, seed: u64) -> MuStar {
    let per_batch = draws.div_ceil(ORACLE_BATCHES as usize).max(1);
    let batches: Vec<(f64, f64)> = (0..ORACLE_BATCHES)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c);
            let nb = per_batch as f64;
            (0..per_batch).fold((0.0, 0.0), |(a, b), k| {
                let u = (k as f64 + rng.random::<f64>()) / nb;
                let x1 = normal_quantile(u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON));
                let (num, den) = conditional_target_moments(scenario, outcome, x1);
                (a + num, b + den)
            })
        })
        .collect();
    let (sa, sb) = batches
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let value = sa / sb;
    let ratios: Vec<f64> = batches.iter().map(|(a, b)| a / b).collect();
    let nb = ratios.len() as f64;
    let mean_r = ratios.iter().sum::<f64>() / nb;
    let var = ratios
        .iter()
        .map(|r| (r - mean_r) * (r - mean_r))
        .sum::<f64>()
        / (nb - 1.0);
    MuStar {
        value,
        se: (var / nb).sqrt(),
    }
}

static MU_STAR: [OnceLock<MuStar>; 8] = [const { OnceLock::new() }; 8];

/// The cached true target mean for a design cell, with its oracle SE.
pub fn true_mu_star_with_se(scenario: Scenario, outcome: OutcomeKind) -> MuStar {
    let slot = 2 * scenario.index() + outcome as usize;
    *MU_STAR[slot].get_or_init(|| {
        mu_star_oracle(
            scenario,
            outcome,
            ORACLE_DRAWS,
            ORACLE_SEED ^ ((slot as u64) << 32),
        )
    })
}

pub fn true_mu_star(scenario: Scenario, outcome: OutcomeKind) -> f64 {
    true_mu_star_with_se(scenario, outcome).value
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Naive,
    Eb,
    Flex,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Naive => "naive",
            Estimator::Eb => "eb",
            Estimator::Flex => "flex",
        }
    }
}

/// Estimators and specifications applied to every replication.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSpec {
    pub estimators: Vec<Estimator>,
    pub basis: BasisSpec,
    pub model: ShiftModel,
    /// Run the specification test on each flexible fit.
    pub model_check: bool,
}

impl MonteCarloSpec {
    /// All three estimators with the standard basis and the scenario's
    /// correctly specified shift model.
    pub fn standard(scenario: Scenario) -> Self {
        Self {
            estimators: vec![Estimator::Naive, Estimator::Eb, Estimator::Flex],
            basis: BasisSpec::parse(DEFAULT_BASIS).expect("default basis parses"),
            model: ShiftModel::parse(scenario.default_model()).expect("default model parses"),
            model_check: false,
        }
    }

    pub fn with_estimators(mut self, estimators: &[Estimator]) -> Self {
        self.estimators = estimators.to_vec();
        self
    }

    pub fn with_model(mut self, model: &str) -> Result<Self> {
        self.model = ShiftModel::parse(model)?;
        Ok(self)
    }

    pub fn with_basis(mut self, basis: &str) -> Result<Self> {
        self.basis = BasisSpec::parse(basis)?;
        Ok(self)
    }

    pub fn with_model_check(mut self) -> Self {
        self.model_check = true;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub estimate: f64,
    pub se: f64,
}

/// Outcome of one replication. `None` entries are estimators that failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub estimates: Vec<Option<PointEstimate>>,
    pub p_value: Option<f64>,
}

impl ReplicationRecord {
    pub fn failed(&self) -> bool {
        self.estimates.iter().any(Option::is_none)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRow {
    pub estimator: Estimator,
    pub bias: f64,
    pub sd: f64,
    pub mean_se: f64,
    /// Fraction of replications whose 95% interval covers `μ*`.
    pub coverage: f64,
    /// Replications in which this estimator failed.
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimScenario,
    pub mu_star_true: f64,
    pub mu_star_se: f64,
    pub rows: Vec<EstimatorRow>,
    pub reps_completed: usize,
    pub reps_failed: usize,
    /// More than 5% of replications failed.
    pub unstable: bool,
    /// Rejection rate of the specification test at the 5% level.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rejection_rate: Option<f64>,
    #[serde(skip)]
    pub replications: Vec<ReplicationRecord>,
}

impl SimReport {
    pub fn row(&self, estimator: Estimator) -> Option<&EstimatorRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    /// Estimates of one estimator over the completed replications, in order.
    pub fn estimates(&self, estimator: Estimator) -> Vec<PointEstimate> {
        let Some(pos) = self.rows.iter().position(|r| r.estimator == estimator) else {
            return Vec::new();
        };
        self.replications
            .iter()
            .filter(|r| !r.failed())
            .filter_map(|r| r.estimates[pos])
            .collect()
    }

    pub fn p_values(&self) -> Vec<f64> {
        self.replications
            .iter()
            .filter(|r| !r.failed())
            .filter_map(|r| r.p_value)
            .collect()
    }
}

/// The generator for replication `rep`: keyed by the run seed, with the
/// replication index selecting an independent stream.
pub fn replication_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

fn run_replication(cfg: &SimScenario, spec: &MonteCarloSpec, rep: usize) -> ReplicationRecord {
    let mut rng = replication_rng(cfg.seed, rep);
    let Ok(study) = gen_study(cfg.scenario, cfg.outcome, cfg.n, cfg.m, &mut rng) else {
        return ReplicationRecord {
            rep,
            estimates: vec![None; spec.estimators.len()],
            p_value: None,
        };
    };
    let data = &study.source;
    let summary = study.target_summary(&spec.basis);
    let mut p_value = None;
    let estimates = spec
        .estimators
        .iter()
        .map(|est| {
            let summary = summary.as_ref().ok()?;
            match est {
                Estimator::Naive => {
                    let n = data.n() as f64;
                    let mean = data.mean_y();
                    let ss: f64 = data.y().iter().map(|v| (v - mean) * (v - mean)).sum();
                    Some(PointEstimate {
                        estimate: mean,
                        se: (ss / (n - 1.0)).sqrt() / n.sqrt(),
                    })
                }
                Estimator::Eb => {
                    eb_estimate(data, &spec.basis, summary)
                        .ok()
                        .map(|f| PointEstimate {
                            estimate: f.mu,
                            se: f.se,
                        })
                }
                Estimator::Flex => {
                    let fit = flex_estimate(data, &spec.model, &spec.basis, summary).ok()?;
                    if spec.model_check {
                        p_value = specification_test(&fit, data, &spec.model, &spec.basis, summary)
                            .ok()
                            .map(|r| r.p_value);
                    }
                    Some(PointEstimate {
                        estimate: fit.mu,
                        se: fit.se,
                    })
                }
            }
        })
        .collect();
    ReplicationRecord {
        rep,
        estimates,
        p_value,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Run `cfg.reps` replications on up to `workers` threads and aggregate the
/// per-estimator metrics. A replication in which any estimator fails is
/// excluded from every row.
pub fn run_monte_carlo(
    cfg: &SimScenario,
    spec: &MonteCarloSpec,
    workers: usize,
) -> Result<SimReport> {
    if cfg.reps < 2 {
        return Err(Error::InvalidDataset(
            "at least 2 replications are required".into(),
        ));
    }
    if cfg.n < 2 || cfg.m < 2 {
        return Err(Error::InvalidDataset("n and m must be at least 2".into()));
    }
    if spec.estimators.is_empty() {
        return Err(Error::InvalidDataset("no estimators requested".into()));
    }
    spec.model.check_against(&spec.basis)?;
    let mu_star = true_mu_star_with_se(cfg.scenario, cfg.outcome);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Io(e.to_string()))?;
    let records: Vec<ReplicationRecord> = pool.install(|| {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| run_replication(cfg, spec, rep))
            .collect()
    });
    Ok(aggregate(cfg, spec, mu_star, records))
}

fn aggregate(
    cfg: &SimScenario,
    spec: &MonteCarloSpec,
    mu_star: MuStar,
    records: Vec<ReplicationRecord>,
) -> SimReport {
    let z = normal_quantile(0.975);
    let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| !r.failed()).collect();
    let rows = spec
        .estimators
        .iter()
        .enumerate()
        .map(|(pos, &estimator)| {
            let failed = records
                .iter()
                .filter(|r| r.estimates[pos].is_none())
                .count();
            let pts: Vec<PointEstimate> = ok.iter().filter_map(|r| r.estimates[pos]).collect();
            let est: Vec<f64> = pts.iter().map(|p| p.estimate).collect();
            let se: Vec<f64> = pts.iter().map(|p| p.se).collect();
            let mu_hat = mean(&est);
            let sd = (est.iter().map(|e| (e - mu_hat) * (e - mu_hat)).sum::<f64>()
                / (est.len() as f64 - 1.0))
                .sqrt();
            let covered = pts
                .iter()
                .filter(|p| (p.estimate - mu_star.value).abs() <= z * p.se)
                .count();
            EstimatorRow {
                estimator,
                bias: mu_hat - mu_star.value,
                sd,
                mean_se: mean(&se),
                coverage: covered as f64 / pts.len() as f64,
                failed,
            }
        })
        .collect();
    let reps_failed = records.len() - ok.len();
    let rejection_rate = spec.model_check.then(|| {
        let p: Vec<f64> = ok.iter().filter_map(|r| r.p_value).collect();
        p.iter().filter(|&&v| v < 0.05).count() as f64 / p.len() as f64
    });
    SimReport {
        config: *cfg,
        mu_star_true: mu_star.value,
        mu_star_se: mu_star.se,
        rows,
        reps_completed: ok.len(),
        reps_failed,
        unstable: reps_failed as f64 > 0.05 * cfg.reps as f64,
        rejection_rate,
        replications: records,
    }
}
