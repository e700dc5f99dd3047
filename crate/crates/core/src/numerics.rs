//! Shared numerical kernels: stable log-sum-exp, a damped Newton maximizer for
//! smooth concave objectives, symmetric solves, and the two distribution
//! functions needed for inference.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::gamma_ur;

/// `log Σ exp(v_i)` without overflow.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    assert!(
        !v.is_empty(),
        "contract violation: log_sum_exp of empty vector"
    );
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// `log (n⁻¹ Σ exp(v_i))`, accurate to relative precision when all entries are
/// close to zero. Dual objectives are evaluated through this so that values near
/// the optimum are not swamped by the `n log n` offset.
pub fn log_mean_exp(v: &[f64]) -> f64 {
    assert!(
        !v.is_empty(),
        "contract violation: log_mean_exp of empty vector"
    );
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let n = v.len() as f64;
    if max.abs() <= 1.0 {
        let s: f64 = v.iter().map(|&x| x.exp_m1()).sum::<f64>() / n;
        return s.ln_1p();
    }
    let s: f64 = v.iter().map(|&x| (x - max).exp()).sum::<f64>() / n;
    max + s.ln()
}

/// Soft-max weights of `v`, normalized to sum to one.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Infinity-norm threshold on the gradient.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub backtrack_ratio: f64,
    pub armijo_c: f64,
    /// Iterates with infinity norm beyond this are treated as escaping to
    /// infinity along an unbounded ray.
    pub divergence_bound: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-10,
            max_iter: 100,
            backtrack_ratio: 0.5,
            armijo_c: 1e-4,
            divergence_bound: 1e6,
        }
    }
}

impl NewtonConfig {
    pub fn with_grad_tol(mut self, tol: f64) -> Self {
        self.grad_tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum NewtonError {
    #[error("ill-conditioned system")]
    IllConditioned,
    #[error("unbounded objective")]
    Unbounded,
    #[error("objective undefined at the starting point")]
    InvalidStart,
}

/// A smooth objective to be maximized. `None` marks points outside the domain
/// (or where an inner computation failed); the line search backs away from them.
pub trait ConcaveObjective {
    fn value(&mut self, x: &DVector<f64>) -> Option<f64>;

    /// Value, gradient and Hessian at `x`.
    fn derivatives(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)>;
}

/// Solve `A x = b` for symmetric positive definite `A`, adding a
/// Levenberg-style ridge `τ I` (τ from 1e-10 relative, growing ×10) when the
/// Cholesky factorization fails. Returns the solution and the ridge used.
pub fn solve_spd_ridged(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Some((x, 0.0));
        }
    }
    let scale = a
        .diagonal()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    let mut tau = 1e-10 * scale;
    for _ in 0..24 {
        let mut r = a.clone();
        for i in 0..r.nrows() {
            r[(i, i)] += tau;
        }
        if let Some(ch) = r.cholesky() {
            let x = ch.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Some((x, tau));
            }
        }
        tau *= 10.0;
    }
    None
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Damped Newton ascent with Armijo backtracking.
///
/// The iteration budget running out is not an error: the returned report has
/// `converged == false` and the caller decides what to do with it.
pub fn newton_maximize<O: ConcaveObjective + ?Sized>(
    objective: &mut O,
    x0: DVector<f64>,
    cfg: &NewtonConfig,
) -> Result<(DVector<f64>, SolveReport), NewtonError> {
    let mut x = x0;
    let (mut f, mut g, mut h) = objective.derivatives(&x).ok_or(NewtonError::InvalidStart)?;
    if !f.is_finite() {
        return Err(NewtonError::InvalidStart);
    }
    let mut report = SolveReport {
        converged: false,
        iterations: 0,
        final_grad_norm: inf_norm(&g),
        objective: f,
    };
    let mut streak = 0usize;
    let mut prev_step = 0.0f64;

    loop {
        let gnorm = inf_norm(&g);
        report.final_grad_norm = gnorm;
        report.objective = f;
        if gnorm <= cfg.grad_tol {
            report.converged = true;
            return Ok((x, report));
        }
        if report.iterations >= cfg.max_iter {
            return Ok((x, report));
        }

        let neg_h = -&h;
        let (mut dir, _) = solve_spd_ridged(&neg_h, &g).ok_or(NewtonError::IllConditioned)?;
        let mut slope = g.dot(&dir);
        if !(slope > 0.0) {
            dir = g.clone();
            slope = g.dot(&g);
        }

        let noise = 4.0 * f64::EPSILON * (1.0 + f.abs());
        let mut t = 1.0;
        let mut accepted = None;
        // Inside the quadratic region the predicted gain is below what the
        // objective can resolve, so the Armijo test is meaningless there.
        if slope <= 1e-12 * (1.0 + f.abs()) {
            let trial = &x + &dir;
            if let Some(ft) = objective.value(&trial).filter(|v| v.is_finite()) {
                accepted = Some((trial, ft));
            }
        }
        while accepted.is_none() && t > 1e-20 {
            let trial = &x + &dir * t;
            if let Some(ft) = objective.value(&trial) {
                if ft.is_finite() && ft >= f + cfg.armijo_c * t * slope - noise {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            t *= cfg.backtrack_ratio;
        }
        let Some((x_new, f_new)) = accepted else {
            // No ascent possible at working precision.
            return Ok((x, report));
        };

        let step = t * inf_norm(&dir);
        if f_new > f && step > prev_step {
            streak += 1;
        } else {
            streak = 0;
        }
        prev_step = step;
        report.iterations += 1;

        let xnorm = inf_norm(&x_new);
        if xnorm > cfg.divergence_bound || (streak >= 5 && xnorm > cfg.divergence_bound.sqrt()) {
            return Err(NewtonError::Unbounded);
        }

        x = x_new;
        match objective.derivatives(&x) {
            Some((fv, gv, hv)) => {
                f = fv;
                g = gv;
                h = hv;
            }
            None => return Ok((x, report)),
        }
    }
}

/// Upper tail `P(χ²_df > x)`. `df = 0` is the point mass at zero.
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    assert!(
        x >= 0.0,
        "contract violation: chi2_sf requires x >= 0, got {x}"
    );
    if df == 0 {
        return if x > 0.0 { 0.0 } else { 1.0 };
    }
    if x == 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(df as f64 / 2.0, x / 2.0).clamp(0.0, 1.0)
}

/// Inverse of the standard normal CDF.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(
        p > 0.0 && p < 1.0,
        "contract violation: normal_quantile requires 0 < p < 1, got {p}"
    );
    if p == 0.5 {
        return 0.0;
    }
    let normal = Normal::standard();
    // Evaluate in the lower tail and reflect so that q(p) = -q(1 - p) exactly.
    if p > 0.5 {
        -normal.inverse_cdf(1.0 - p)
    } else {
        normal.inverse_cdf(p)
    }
}

/// Symmetric eigendecomposition based inverse with eigenvalues floored at
/// `rel_floor · λ_max`. Returns `None` when the matrix has no positive
/// eigenvalue.
pub fn floored_spd_inverse(a: &DMatrix<f64>, rel_floor: f64) -> Option<DMatrix<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return None;
    }
    let floor = rel_floor * max;
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v.max(floor));
    let q = &eig.eigenvectors;
    Some(q * DMatrix::from_diagonal(&inv_vals) * q.transpose())
}

/// Add a multiple of the identity when the smallest eigenvalue of a symmetric
/// matrix falls below `1e-10 · trace/K`, lifting it to at least `1e-8 · trace/K`.
pub fn ridge_repair(a: &DMatrix<f64>) -> DMatrix<f64> {
    let k = a.nrows();
    let mut sym = (a + a.transpose()) * 0.5;
    if k == 0 {
        return sym;
    }
    let mut scale = sym.trace() / k as f64;
    if !(scale > 0.0) {
        scale = sym
            .diagonal()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1.0);
    }
    let min_eig = sym
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min_eig < 1e-10 * scale {
        let shift = 1e-8 * scale - min_eig.min(0.0);
        for i in 0..k {
            sym[(i, i)] += shift;
        }
    }
    sym
}
