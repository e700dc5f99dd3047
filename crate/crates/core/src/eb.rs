//! Entropy balancing against target moments, its summary-only variance
//! estimator, and the penalized ("augmented") variant that treats `φ̂*` as
//! noisy.

use nalgebra::{DMatrix, DVector};

use crate::basis::evaluate_basis;
use crate::data::{validate_pairing, BasisSpec, EbFit, SourceDataset, TargetSummary};
use crate::error::{Error, Result};
use crate::numerics::{newton_maximize, ConcaveObjective, NewtonConfig, NewtonError, SolveReport};
use crate::scaling::ColumnScaling;
use crate::tilt::{solve_tilt, weighted_moments, TiltDual};

/// Value, gradient and Hessian of `λ ↦ −n log Σ_i exp{λᵀ(B_i − φ̂*)}`.
pub fn eb_dual_objective(
    lambda: &DVector<f64>,
    b: &DMatrix<f64>,
    phi_hat: &DVector<f64>,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    assert_eq!(b.ncols(), lambda.len(), "lambda has wrong dimension");
    assert_eq!(b.ncols(), phi_hat.len(), "phi_hat has wrong dimension");
    let n = b.nrows() as f64;
    let rows = centered_rows(b, phi_hat);
    let (value, grad, hess) = TiltDual { rows: &rows }
        .derivatives(lambda)
        .expect("finite basis gives a finite dual");
    (value - n * n.ln(), grad, hess)
}

fn centered_rows(b: &DMatrix<f64>, phi: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)] - phi[j])
}

fn map_newton(e: NewtonError) -> Error {
    match e {
        NewtonError::Unbounded => Error::InfeasibleCalibration,
        NewtonError::IllConditioned => {
            Error::IllConditioned("balancing dual Hessian is singular".into())
        }
        NewtonError::InvalidStart => {
            Error::IllConditioned("balancing dual undefined at start".into())
        }
    }
}

#[derive(Debug, Clone)]
pub struct EbWeights {
    /// `λ̂` on the original basis scale.
    pub lambda: DVector<f64>,
    pub p: Vec<f64>,
    pub report: SolveReport,
}

struct Prepared {
    scaling: ColumnScaling,
    z: DMatrix<f64>,
    phi_star: DVector<f64>,
}

fn prepare(data: &SourceDataset, basis: &BasisSpec, summary: &TargetSummary) -> Result<Prepared> {
    validate_pairing(basis, summary)?;
    let b = evaluate_basis(basis.terms(), data)?;
    let scaling = ColumnScaling::fit(&b, &basis.labels())?;
    let z = scaling.apply(&b);
    Ok(Prepared {
        scaling,
        z,
        phi_star: DVector::from_column_slice(&summary.phi_hat),
    })
}

/// Solve the balancing dual in standardized coordinates and return the weights.
pub(crate) fn solve_standardized(
    z: &DMatrix<f64>,
    phi_z: &DVector<f64>,
    start: DVector<f64>,
) -> Result<(DVector<f64>, Vec<f64>, SolveReport)> {
    let rows = centered_rows(z, phi_z);
    let sol = solve_tilt(&rows, start, &NewtonConfig::default()).map_err(map_newton)?;
    Ok((sol.multiplier, sol.weights, sol.report))
}

/// Entropy-balancing weights `p̂_i ∝ exp{λ̂ᵀ(Φ(x_i) − φ̂*)}`.
pub fn solve_eb_weights(
    data: &SourceDataset,
    basis: &BasisSpec,
    summary: &TargetSummary,
) -> Result<EbWeights> {
    let prep = prepare(data, basis, summary)?;
    let phi_z = prep.scaling.apply_point(&prep.phi_star);
    let (lambda_z, p, report) = solve_standardized(&prep.z, &phi_z, DVector::zeros(basis.k()))?;
    if !report.converged {
        return Err(Error::NotConverged(format!(
            "balancing dual stopped after {} iterations with gradient {:.3e}",
            report.iterations, report.final_grad_norm
        )));
    }
    let lambda = lambda_z.component_div(&prep.scaling.scale);
    Ok(EbWeights { lambda, p, report })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EbVariance {
    pub sigma_eb: DMatrix<f64>,
    pub omega: DVector<f64>,
    pub sigma2: f64,
    pub se: f64,
}

/// Plug-in variance of the balancing estimator with `π̂(x_i) = n p̂_i`.
pub fn eb_variance_from_basis(
    p: &[f64],
    mu: f64,
    y: &[f64],
    b: &DMatrix<f64>,
    phi_hat: &DVector<f64>,
    m: usize,
) -> Result<EbVariance> {
    let n = y.len();
    let nf = n as f64;
    let k = b.ncols();
    let (_, second) = weighted_moments(b, p);
    let sigma_eb = &second - phi_hat * phi_hat.transpose();

    let c = centered_rows(b, phi_hat);
    let (_, cov) = weighted_moments(&c, p);
    let mut rhs = DVector::zeros(k);
    for i in 0..n {
        rhs += c.row(i).transpose() * (p[i] * y[i]);
    }
    let omega = cov
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .ok_or(Error::DegenerateBalancedCovariance)?;

    let u: Vec<f64> = (0..n)
        .map(|i| {
            let pi = nf * p[i];
            let proj = (c.row(i) * &omega)[0];
            pi * y[i] - mu - mu * (pi - 1.0) - pi * proj
        })
        .collect();
    let u_bar = u.iter().sum::<f64>() / nf;
    let sigma2_u = u.iter().map(|v| (v - u_bar) * (v - u_bar)).sum::<f64>() / nf;
    let quad = (omega.transpose() * &sigma_eb * &omega)[0];
    let sigma2 = sigma2_u + nf / m as f64 * quad;
    Ok(EbVariance {
        sigma_eb,
        omega,
        sigma2,
        se: (sigma2 / nf).sqrt(),
    })
}

pub fn eb_variance(
    p: &[f64],
    mu: f64,
    data: &SourceDataset,
    basis: &BasisSpec,
    summary: &TargetSummary,
) -> Result<EbVariance> {
    validate_pairing(basis, summary)?;
    let b = evaluate_basis(basis.terms(), data)?;
    let phi = DVector::from_column_slice(&summary.phi_hat);
    eb_variance_from_basis(p, mu, data.y(), &b, &phi, summary.m)
}

/// Balancing estimate `μ̂_EB = Σ p̂_i y_i` with its variance components.
pub fn eb_estimate(
    data: &SourceDataset,
    basis: &BasisSpec,
    summary: &TargetSummary,
) -> Result<EbFit> {
    let w = solve_eb_weights(data, basis, summary)?;
    let mu = w.p.iter().zip(data.y()).map(|(p, y)| p * y).sum::<f64>();
    let b = evaluate_basis(basis.terms(), data)?;
    let phi = DVector::from_column_slice(&summary.phi_hat);
    let var = eb_variance_from_basis(&w.p, mu, data.y(), &b, &phi, summary.m)?;
    Ok(EbFit {
        lambda: w.lambda,
        p: w.p,
        mu,
        sigma_eb: var.sigma_eb,
        omega: var.omega,
        sigma2: var.sigma2,
        se: var.se,
        report: w.report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugEbFit {
    pub lambda_eb: DVector<f64>,
    pub phi_eb: DVector<f64>,
    pub p: Vec<f64>,
    pub mu: f64,
    pub report: SolveReport,
}

/// Dual value, multipliers, weights and basis rows at a fixed `φ`.
type InnerBalance = (f64, DVector<f64>, Vec<f64>, DMatrix<f64>);

/// `φ ↦ −[D(φ) + (m/2)(φ̂* − φ)ᵀV⁻¹(φ̂* − φ)]` where `D(φ)` is the minimum
/// entropy of weights balancing the source to `φ`.
struct PenalizedBalance<'a> {
    z: &'a DMatrix<f64>,
    phi_star: &'a DVector<f64>,
    v_inv: &'a DMatrix<f64>,
    m: f64,
    warm: DVector<f64>,
}

impl PenalizedBalance<'_> {
    fn inner(&mut self, phi: &DVector<f64>) -> Option<InnerBalance> {
        let rows = centered_rows(self.z, phi);
        let sol = solve_tilt(&rows, self.warm.clone(), &NewtonConfig::default()).ok()?;
        if !sol.report.converged {
            return None;
        }
        self.warm = sol.multiplier.clone();
        Some((sol.report.objective, sol.multiplier, sol.weights, rows))
    }

    fn penalty(&self, phi: &DVector<f64>) -> f64 {
        let d = self.phi_star - phi;
        0.5 * self.m * (d.transpose() * self.v_inv * &d)[0]
    }
}

impl ConcaveObjective for PenalizedBalance<'_> {
    fn value(&mut self, phi: &DVector<f64>) -> Option<f64> {
        let saved = self.warm.clone();
        let out = self.inner(phi).map(|(d, ..)| -(d + self.penalty(phi)));
        self.warm = saved;
        out
    }

    fn derivatives(&mut self, phi: &DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let (d, lambda, p, rows) = self.inner(phi)?;
        let n = self.z.nrows() as f64;
        let value = -(d + self.penalty(phi));
        let grad = -(&lambda * n - self.v_inv * (self.phi_star - phi) * self.m);
        let (mean, second) = weighted_moments(&rows, &p);
        let cov = second - &mean * mean.transpose();
        let cov_inv = cov.cholesky()?.inverse();
        let hess = -(cov_inv * n + self.v_inv * self.m);
        Some((value, grad, hess))
    }
}

/// Balancing with `φ` itself estimated under a quadratic penalty towards
/// `φ̂*`, weighted by `V⁻¹`. Solves the joint conditions
/// `Σ p_i(Φ_i − φ) = 0` and `λ = (m/n)V⁻¹(φ̂* − φ)`.
pub fn augmented_eb_estimate(
    data: &SourceDataset,
    basis: &BasisSpec,
    summary: &TargetSummary,
    v: &DMatrix<f64>,
) -> Result<AugEbFit> {
    let k = basis.k();
    if v.nrows() != k || v.ncols() != k {
        return Err(Error::InvalidModel(format!("V must be {k}×{k}")));
    }
    let prep = prepare(data, basis, summary)?;
    let v_z = prep.scaling.standardize_form(v);
    let v_inv = v_z
        .cholesky()
        .ok_or_else(|| Error::InvalidModel("V must be positive definite".into()))?
        .inverse();
    let phi_star_z = prep.scaling.apply_point(&prep.phi_star);
    let mut obj = PenalizedBalance {
        z: &prep.z,
        phi_star: &phi_star_z,
        v_inv: &v_inv,
        m: summary.m as f64,
        warm: DVector::zeros(k),
    };
    let cfg = NewtonConfig::default()
        .with_grad_tol(1e-8)
        .with_max_iter(200);
    let (phi_z, report) =
        newton_maximize(&mut obj, phi_star_z.clone(), &cfg).map_err(map_newton)?;
    let (_, lambda_z, p, _) = obj
        .inner(&phi_z)
        .ok_or_else(|| Error::NotConverged("balancing dual at the penalized solution".into()))?;
    let mu = p.iter().zip(data.y()).map(|(p, y)| p * y).sum();
    Ok(AugEbFit {
        lambda_eb: lambda_z.component_div(&prep.scaling.scale),
        phi_eb: prep.scaling.invert_point(&phi_z),
        p,
        mu,
        report,
    })
}
