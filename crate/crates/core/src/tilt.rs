//! The exponential-tilting dual shared by entropy balancing and the inner
//! maximization of the flexible estimator:
//!
//! maximize `−n · log mean_i exp(r_iᵀ θ)` over `θ`,
//!
//! whose maximizer puts soft-max weights on the rows `r_i` such that the
//! weighted mean of the rows is zero.

use nalgebra::{DMatrix, DVector};

use crate::numerics::{
    log_mean_exp, newton_maximize, softmax, ConcaveObjective, NewtonConfig, NewtonError,
    SolveReport,
};

pub(crate) struct TiltDual<'a> {
    pub rows: &'a DMatrix<f64>,
}

impl TiltDual<'_> {
    fn scores(&self, theta: &DVector<f64>) -> Vec<f64> {
        (self.rows * theta).as_slice().to_vec()
    }
}

/// Weighted mean and weighted second moment `Σ w r rᵀ` of the rows.
pub(crate) fn weighted_moments(rows: &DMatrix<f64>, w: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let p = rows.ncols();
    let mut mean = DVector::zeros(p);
    let mut second = DMatrix::zeros(p, p);
    for (i, &wi) in w.iter().enumerate() {
        let r = rows.row(i);
        for a in 0..p {
            let wa = wi * r[a];
            mean[a] += wa;
            for b in 0..=a {
                second[(a, b)] += wa * r[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            second[(b, a)] = second[(a, b)];
        }
    }
    (mean, second)
}

impl ConcaveObjective for TiltDual<'_> {
    fn value(&mut self, theta: &DVector<f64>) -> Option<f64> {
        let n = self.rows.nrows() as f64;
        let v = -n * log_mean_exp(&self.scores(theta));
        v.is_finite().then_some(v)
    }

    fn derivatives(&mut self, theta: &DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let n = self.rows.nrows() as f64;
        let s = self.scores(theta);
        let value = -n * log_mean_exp(&s);
        if !value.is_finite() {
            return None;
        }
        let w = softmax(&s);
        let (mean, second) = weighted_moments(self.rows, &w);
        let grad = &mean * (-n);
        let hess = (second - &mean * mean.transpose()) * (-n);
        Some((value, grad, hess))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TiltSolution {
    pub multiplier: DVector<f64>,
    pub weights: Vec<f64>,
    pub report: SolveReport,
}

pub(crate) fn solve_tilt(
    rows: &DMatrix<f64>,
    start: DVector<f64>,
    cfg: &NewtonConfig,
) -> Result<TiltSolution, NewtonError> {
    let mut dual = TiltDual { rows };
    let (theta, report) = newton_maximize(&mut dual, start, cfg)?;
    let weights = softmax((rows * &theta).as_slice());
    Ok(TiltSolution {
        multiplier: theta,
        weights,
        report,
    })
}
