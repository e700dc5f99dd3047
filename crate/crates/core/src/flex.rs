//! Flexible model-based reweighting.
//!
//! The covariate-shift function is modelled as `π(x; α) = exp(α₀ + Σ α_j t_j(x))`
//! and estimated from the moment conditions
//! `E{h(X; α, φ)} = 0`, `h = (π − 1, π (Φ − φ)ᵀ)ᵀ`, using exponential tilting
//! with a quadratic penalty that lets `φ` move away from the noisy summary `φ̂*`.
//! The estimator is the saddle point
//!
//! `min_{α,φ} max_η  −n log Σ_i exp{ηᵀh(x_i; α, φ)} + (m/2)(φ̂* − φ)ᵀV⁻¹(φ̂* − φ)`.
//!
//! The inner maximization over `η` is solved exactly (it is a smooth concave
//! tilting dual); the outer problem is minimized by Newton steps on the
//! profiled objective, whose gradient follows from the envelope property and
//! whose Hessian is the Schur complement of the joint Hessian.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::basis::evaluate_basis;
use crate::data::{validate_pairing, BasisSpec, FlexFit, ShiftModel, SourceDataset, TargetSummary};
use crate::error::{Error, Result};
use crate::numerics::{
    newton_maximize, ridge_repair, solve_spd_ridged, ConcaveObjective, NewtonConfig, NewtonError,
    SolveReport,
};
use crate::scaling::ColumnScaling;
use crate::tilt::{solve_tilt, weighted_moments};

const MAX_EXPONENT: f64 = 700.0;

/// Shift-model design: a leading column of ones followed by the model terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftDesign {
    pub design: DMatrix<f64>,
}

pub fn shift_design(model: &ShiftModel, data: &SourceDataset) -> Result<ShiftDesign> {
    let terms = evaluate_basis(model.terms(), data)?;
    Ok(ShiftDesign {
        design: with_intercept(&terms),
    })
}

fn with_intercept(terms: &DMatrix<f64>) -> DMatrix<f64> {
    let n = terms.nrows();
    DMatrix::from_fn(n, terms.ncols() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            terms[(i, j - 1)]
        }
    })
}

impl ShiftDesign {
    pub fn d_alpha(&self) -> usize {
        self.design.ncols()
    }

    /// `π(x_i; α)` for every row; `None` if an exponent overflows.
    pub fn pi(&self, alpha: &DVector<f64>) -> Option<Vec<f64>> {
        pi_values(&self.design, alpha)
    }

    /// `∂π(x_i; α)/∂α = π_i (1, t(x_i)ᵀ)`, one row per observation.
    pub fn pi_gradient(&self, alpha: &DVector<f64>) -> Option<DMatrix<f64>> {
        let pi = self.pi(alpha)?;
        Some(DMatrix::from_fn(
            self.design.nrows(),
            self.design.ncols(),
            |i, j| pi[i] * self.design[(i, j)],
        ))
    }
}

fn pi_values(design: &DMatrix<f64>, alpha: &DVector<f64>) -> Option<Vec<f64>> {
    let eta = design * alpha;
    if eta.iter().any(|v| !(v.abs() <= MAX_EXPONENT)) {
        return None;
    }
    Some(eta.iter().map(|v| v.exp()).collect())
}

/// Rows `h(x_i; α, φ)` together with the `π` values they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct HStack {
    pub h: DMatrix<f64>,
    pub pi: Vec<f64>,
}

pub(crate) fn h_stack(
    design: &DMatrix<f64>,
    b: &DMatrix<f64>,
    alpha: &DVector<f64>,
    phi: &DVector<f64>,
) -> Option<HStack> {
    let pi = pi_values(design, alpha)?;
    let (n, k) = (b.nrows(), b.ncols());
    let h = DMatrix::from_fn(n, k + 1, |i, j| {
        if j == 0 {
            pi[i] - 1.0
        } else {
            pi[i] * (b[(i, j - 1)] - phi[j - 1])
        }
    });
    Some(HStack { h, pi })
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum() / n)
}

/// Inputs of one fit on both the original and the standardized scale.
struct Prepared {
    design: DMatrix<f64>,
    b: DMatrix<f64>,
    phi_star: DVector<f64>,
    design_z: DMatrix<f64>,
    z: DMatrix<f64>,
    phi_star_z: DVector<f64>,
    basis_scaling: ColumnScaling,
    term_scaling: Option<ColumnScaling>,
    m: usize,
}

impl Prepared {
    fn new(
        data: &SourceDataset,
        model: &ShiftModel,
        basis: &BasisSpec,
        summary: &TargetSummary,
    ) -> Result<Self> {
        validate_pairing(basis, summary)?;
        model.check_against(basis)?;
        let b = evaluate_basis(basis.terms(), data)?;
        let terms = evaluate_basis(model.terms(), data)?;
        let basis_scaling = ColumnScaling::fit(&b, &basis.labels())?;
        let term_labels: Vec<String> = model.terms().iter().map(|t| t.to_string()).collect();
        let term_scaling = if terms.ncols() > 0 {
            Some(ColumnScaling::fit(&terms, &term_labels)?)
        } else {
            None
        };
        let terms_z = match &term_scaling {
            Some(s) => s.apply(&terms),
            None => terms.clone(),
        };
        let phi_star = DVector::from_column_slice(&summary.phi_hat);
        Ok(Self {
            design: with_intercept(&terms),
            design_z: with_intercept(&terms_z),
            z: basis_scaling.apply(&b),
            phi_star_z: basis_scaling.apply_point(&phi_star),
            b,
            phi_star,
            basis_scaling,
            term_scaling,
            m: summary.m,
        })
    }

    fn alpha_to_original(&self, alpha_z: &DVector<f64>) -> DVector<f64> {
        let mut a = alpha_z.clone();
        if let Some(s) = &self.term_scaling {
            for j in 1..a.len() {
                a[j] = alpha_z[j] / s.scale[j - 1];
                a[0] -= alpha_z[j] * s.center[j - 1] / s.scale[j - 1];
            }
        }
        a
    }

    /// `η` acting on standardized `h` mapped to the original scale of `Φ`.
    fn eta_to_original(&self, eta_z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(eta_z.len(), |j, _| {
            if j == 0 {
                eta_z[0]
            } else {
                eta_z[j] / self.basis_scaling.scale[j - 1]
            }
        })
    }
}

/// `n⁻¹ Σ_i h(x_i; α, φ)`.
pub fn h_n(
    data: &SourceDataset,
    model: &ShiftModel,
    basis: &BasisSpec,
    alpha: &DVector<f64>,
    phi: &DVector<f64>,
) -> Result<DVector<f64>> {
    let design = shift_design(model, data)?.design;
    let b = evaluate_basis(basis.terms(), data)?;
    check_dims(&design, &b, alpha, phi)?;
    let hs = h_stack(&design, &b, alpha, phi)
        .ok_or_else(|| Error::InvalidModel("π(x; α) overflows".into()))?;
    Ok(column_means(&hs.h))
}

fn check_dims(
    design: &DMatrix<f64>,
    b: &DMatrix<f64>,
    alpha: &DVector<f64>,
    phi: &DVector<f64>,
) -> Result<()> {
    if alpha.len() != design.ncols() || phi.len() != b.ncols() {
        return Err(Error::InvalidModel(format!(
            "expected α of length {} and φ of length {}",
            design.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Residual `h_n(α, φ)` and its Jacobian in `α`.
fn residual_and_jacobian(
    design: &DMatrix<f64>,
    b: &DMatrix<f64>,
    alpha: &DVector<f64>,
    phi: &DVector<f64>,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let hs = h_stack(design, b, alpha, phi)?;
    let n = b.nrows() as f64;
    let r = column_means(&hs.h);
    let mut jac = DMatrix::zeros(hs.h.ncols(), design.ncols());
    for i in 0..b.nrows() {
        for a in 0..hs.h.ncols() {
            let ha = if a == 0 { hs.pi[i] } else { hs.h[(i, a)] };
            for c in 0..design.ncols() {
                jac[(a, c)] += ha * design[(i, c)];
            }
        }
    }
    jac /= n;
    Some((r, jac))
}

/// Levenberg–Marquardt on `½‖h_n(α, φ)‖²`. Returns `(α, ‖h_n‖², ‖Jᵀr‖∞)`.
fn gauss_newton(
    design: &DMatrix<f64>,
    b: &DMatrix<f64>,
    phi: &DVector<f64>,
    start: DVector<f64>,
    tol: f64,
) -> Option<(DVector<f64>, f64, f64)> {
    let mut alpha = start;
    let (mut r, mut jac) = residual_and_jacobian(design, b, &alpha, phi)?;
    let mut obj = r.norm_squared();
    let mut damping = 1e-3;
    let mut stat = f64::INFINITY;
    for _ in 0..500 {
        let g = jac.transpose() * &r;
        stat = g.amax();
        if stat <= tol || obj <= 1e-30 {
            return Some((alpha, obj, stat));
        }
        let jtj = jac.transpose() * &jac;
        let mut accepted = false;
        while damping < 1e12 {
            let mut a = jtj.clone();
            for d in 0..a.nrows() {
                a[(d, d)] += damping * jtj[(d, d)].max(1e-12);
            }
            let Some((step, _)) = solve_spd_ridged(&a, &(-&g)) else {
                damping *= 4.0;
                continue;
            };
            let trial = &alpha + step;
            if let Some((rt, jt)) = residual_and_jacobian(design, b, &trial, phi) {
                let ot = rt.norm_squared();
                if ot < obj {
                    alpha = trial;
                    r = rt;
                    jac = jt;
                    obj = ot;
                    damping = (damping / 3.0).max(1e-12);
                    accepted = true;
                    break;
                }
            }
            damping *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    let g = jac.transpose() * &r;
    stat = stat.min(g.amax());
    Some((alpha, obj, stat))
}

const INITIAL_STATIONARITY_TOL: f64 = 1e-9;
const INITIAL_RESTARTS: usize = 20;
const RESTART_SEED: u64 = 0x5eed_a1fa;

fn initial_alpha_standardized(prep: &Prepared) -> Result<DVector<f64>> {
    let da = prep.design_z.ncols();
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut consider = |res: Option<(DVector<f64>, f64, f64)>| -> bool {
        if let Some((a, obj, stat)) = res {
            if stat <= INITIAL_STATIONARITY_TOL && best.as_ref().is_none_or(|(_, o)| obj < *o) {
                best = Some((a, obj));
                return true;
            }
        }
        false
    };
    let run = |start| {
        gauss_newton(
            &prep.design_z,
            &prep.z,
            &prep.phi_star_z,
            start,
            INITIAL_STATIONARITY_TOL,
        )
    };
    if !consider(run(DVector::zeros(da))) {
        let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
        let normal = Normal::new(0.0, 0.5).expect("valid normal");
        for _ in 0..INITIAL_RESTARTS {
            let start = DVector::from_fn(da, |_, _| normal.sample(&mut rng));
            consider(run(start));
        }
    }
    best.map(|(a, _)| a).ok_or_else(|| {
        Error::InitialEstimatorFailed(format!(
            "no stationary point of ‖h_n‖² found after {INITIAL_RESTARTS} restarts"
        ))
    })
}

/// Initial shift-model estimate `α̂⁽⁰⁾` minimizing `‖h_n(α, φ̂*)‖²`
/// (computed with the basis standardized).
pub fn initial_alpha(
    data: &SourceDataset,
    model: &ShiftModel,
    basis: &BasisSpec,
    summary: &TargetSummary,
) -> Result<DVector<f64>> {
    let prep = Prepared::new(data, model, basis, summary)?;
    let a = initial_alpha_standardized(&prep)?;
    Ok(prep.alpha_to_original(&a))
}

/// `Σ_i w_i Φ_i Φ_iᵀ − φ φᵀ`, ridge-repaired.
pub(crate) fn weighted_sigma(b: &DMatrix<f64>, w: &[f64], phi: &DVector<f64>) -> DMatrix<f64> {
    let (_, second) = weighted_moments(b, w);
    ridge_repair(&(second - phi * phi.transpose()))
}

/// `Σ̂⁽⁰⁾ = n⁻¹ Σ π(x_i; α̂⁽⁰⁾) Φ_i Φ_iᵀ − φ̂* φ̂*ᵀ`.
pub fn initial_sigma(
    data: &SourceDataset,
    model: &ShiftModel,
    basis: &BasisSpec,
    alpha0: &DVector<f64>,
    summary: &TargetSummary,
) -> Result<DMatrix<f64>> {
    validate_pairing(basis, summary)?;
    let design = shift_design(model, data)?;
    let b = evaluate_basis(basis.terms(), data)?;
    let pi = design
        .pi(alpha0)
        .ok_or_else(|| Error::InvalidModel("π(x; α) overflows".into()))?;
    let n = data.n() as f64;
    let w: Vec<f64> = pi.iter().map(|p| p / n).collect();
    Ok(weighted_sigma(
        &b,
        &w,
        &DVector::from_column_slice(&summary.phi_hat),
    ))
}

/// Inner solution at a fixed `(α, φ)`.
#[derive(Debug, Clone)]
struct Inner {
    eta: DVector<f64>,
    q: Vec<f64>,
    hs: HStack,
    /// `−n log mean_i exp{ηᵀh_i}`
    value: f64,
}

/// The profiled objective `L(α, φ) = max_η ℓ(η, α, φ)` (up to the constant
/// `−n log n`), exposed to the Newton maximizer as `−L`.
struct Profile<'a> {
    design: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
    phi_star: &'a DVector<f64>,
    v_inv: &'a DMatrix<f64>,
    m: f64,
    warm: DVector<f64>,
    inner_cfg: NewtonConfig,
}

impl<'a> Profile<'a> {
    fn da(&self) -> usize {
        self.design.ncols()
    }

    fn split(&self, theta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let da = self.da();
        (
            theta.rows(0, da).into_owned(),
            theta.rows(da, theta.len() - da).into_owned(),
        )
    }

    fn inner(&self, theta: &DVector<f64>) -> std::result::Result<Inner, String> {
        let (alpha, phi) = self.split(theta);
        let hs = h_stack(self.design, self.b, &alpha, &phi).ok_or("π(x; α) overflows")?;
        let sol =
            solve_tilt(&hs.h, self.warm.clone(), &self.inner_cfg).map_err(|e| e.to_string())?;
        if !sol.report.converged {
            return Err(format!(
                "no convergence after {} iterations (gradient {:.3e})",
                sol.report.iterations, sol.report.final_grad_norm
            ));
        }
        Ok(Inner {
            eta: sol.multiplier,
            q: sol.weights,
            hs,
            value: sol.report.objective,
        })
    }

    fn penalty(&self, phi: &DVector<f64>) -> f64 {
        let d = self.phi_star - phi;
        0.5 * self.m * (d.transpose() * self.v_inv * &d)[0]
    }

    /// `L`, `∇L` and `∇²L` at `θ` given the inner solution there.
    fn profiled(&self, theta: &DVector<f64>, inner: &Inner) -> (f64, DVector<f64>, DMatrix<f64>) {
        let (_, phi) = self.split(theta);
        let n = self.b.nrows();
        let nf = n as f64;
        let k = self.b.ncols();
        let ke = k + 1;
        let da = self.da();
        let p = ke + da + k;
        let eta = &inner.eta;
        let eta0 = eta[0];
        let h = &inner.hs.h;
        let pi = &inner.hs.pi;
        let q = &inner.q;

        // Per-row derivatives of the score s_i = ηᵀh_i in (η, α, φ).
        let mut d = DMatrix::zeros(n, p);
        let mut s = vec![0.0; n];
        for i in 0..n {
            let si = (h.row(i) * eta)[0];
            s[i] = si;
            for a in 0..ke {
                d[(i, a)] = h[(i, a)];
            }
            for c in 0..da {
                d[(i, ke + c)] = (si + eta0) * self.design[(i, c)];
            }
            for j in 0..k {
                d[(i, ke + da + j)] = -pi[i] * eta[1 + j];
            }
        }
        let (mean, second) = weighted_moments(&d, q);
        let mut curv = second - &mean * mean.transpose();

        // Σ_i q_i ∂²s_i
        let mut sum_qpi = 0.0;
        for i in 0..n {
            let qi = q[i];
            sum_qpi += qi * pi[i];
            for c in 0..da {
                let tc = self.design[(i, c)];
                // ∂²s/∂η∂α = (h_i + e₀) t_iᵀ
                for a in 0..ke {
                    let ha = if a == 0 { pi[i] } else { h[(i, a)] };
                    let v = qi * ha * tc;
                    curv[(a, ke + c)] += v;
                    curv[(ke + c, a)] += v;
                }
                // ∂²s/∂α∂α = (s_i + η₀) t_i t_iᵀ
                for c2 in 0..da {
                    curv[(ke + c, ke + c2)] += qi * (s[i] + eta0) * tc * self.design[(i, c2)];
                }
                // ∂²s/∂α∂φ = −π_i t_i η₁ᵀ
                for j in 0..k {
                    let v = -qi * pi[i] * tc * eta[1 + j];
                    curv[(ke + c, ke + da + j)] += v;
                    curv[(ke + da + j, ke + c)] += v;
                }
            }
        }
        // ∂²s/∂η∂φ = [0; −π_i I]
        for j in 0..k {
            curv[(1 + j, ke + da + j)] -= sum_qpi;
            curv[(ke + da + j, 1 + j)] -= sum_qpi;
        }
        let mut full = curv * (-nf);
        let pen = self.v_inv * self.m;
        for a in 0..k {
            for b in 0..k {
                full[(ke + da + a, ke + da + b)] += pen[(a, b)];
            }
        }

        let nt = da + k;
        let mut grad = DVector::from_fn(nt, |j, _| -nf * mean[ke + j]);
        let pen_grad = self.v_inv * (self.phi_star - &phi) * self.m;
        for j in 0..k {
            grad[da + j] -= pen_grad[j];
        }

        let h_tt = full.view((ke, ke), (nt, nt)).into_owned();
        let h_te = full.view((ke, 0), (nt, ke)).into_owned();
        let neg_h_ee = -full.view((0, 0), (ke, ke)).into_owned();
        let mut hess = h_tt.clone();
        for c in 0..nt {
            let rhs = h_te.row(c).transpose();
            if let Some((x, _)) = solve_spd_ridged(&neg_h_ee, &rhs) {
                for r in 0..nt {
                    hess[(r, c)] += (h_te.row(r) * &x)[0];
                }
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        (inner.value + self.penalty(&phi), grad, hess)
    }
}

impl ConcaveObjective for Profile<'_> {
    fn value(&mut self, theta: &DVector<f64>) -> Option<f64> {
        let inner = self.inner(theta).ok()?;
        let (_, phi) = self.split(theta);
        Some(-(inner.value + self.penalty(&phi)))
    }

    fn derivatives(&mut self, theta: &DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let inner = self.inner(theta).ok()?;
        self.warm = inner.eta.clone();
        let (v, g, h) = self.profiled(theta, &inner);
        Some((-v, -g, -h))
    }
}

/// `ℓ_V(η, α, φ)` together with its gradient and Hessian in `η`.
#[allow(clippy::too_many_arguments)]
pub fn saddle_objective(
    eta: &DVector<f64>,
    alpha: &DVector<f64>,
    phi: &DVector<f64>,
    data: &SourceDataset,
    model: &ShiftModel,
    basis: &BasisSpec,
    summary: &TargetSummary,
    v: &DMatrix<f64>,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    validate_pairing(basis, summary)?;
    let design = shift_design(model, data)?.design;
    let b = evaluate_basis(basis.terms(), data)?;
    check_dims(&design, &b, alpha, phi)?;
    if eta.len() != b.ncols() + 1 {
        return Err(Error::InvalidModel(format!(
            "expected η of length {}",
            b.ncols() + 1
        )));
    }
    let hs = h_stack(&design, &b, alpha, phi)
        .ok_or_else(|| Error::InvalidModel("π(x; α) overflows".into()))?;
    let (value, grad, hess) = crate::tilt::TiltDual { rows: &hs.h }
        .derivatives(eta)
        .ok_or_else(|| Error::InvalidModel("objective overflows".into()))?;
    let n = data.n() as f64;
    let d = DVector::from_column_slice(&summary.phi_hat) - phi;
    let pen = 0.5
        * summary.m as f64
        * (d.transpose()
            * v.clone()
                .try_inverse()
                .ok_or(Error::IllConditioned("V is singular".into()))?
            * &d)[0];
    Ok((value - n * n.ln() + pen, grad, hess))
}

/// Value and envelope gradient of the profiled objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfiledValue {
    /// `ℓ_V(η*, α, φ)` including the `−n log n` constant.
    pub value: f64,
    /// Gradient in `(α, φ)`, `α` first.
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub eta: DVector<f64>,
}

/// `ℓ_V(η*(α,φ), α, φ)` with `η*` the inner maximizer, evaluated on the
/// original scale of the basis and model terms.
#[allow(clippy::too_many_arguments)]
pub fn profiled_objective(
    alpha: &DVector<f64>,
    phi: &DVector<f64>,
    data: &SourceDataset,
    model: &ShiftModel,
    basis: &BasisSpec,
    summary: &TargetSummary,
    v: &DMatrix<f64>,
) -> Result<ProfiledValue> {
    validate_pairing(basis, summary)?;
    let design = shift_design(model, data)?.design;
    let b = evaluate_basis(basis.terms(), data)?;
    check_dims(&design, &b, alpha, phi)?;
    let v_inv = v
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidModel("V must be positive definite".into()))?
        .inverse();
    let phi_star = DVector::from_column_slice(&summary.phi_hat);
    let profile = Profile {
        design: &design,
        b: &b,
        phi_star: &phi_star,
        v_inv: &v_inv,
        m: summary.m as f64,
        warm: DVector::zeros(b.ncols() + 1),
        inner_cfg: NewtonConfig::default().with_max_iter(200),
    };
    let theta = DVector::from_iterator(
        alpha.len() + phi.len(),
        alpha.iter().chain(phi.iter()).copied(),
    );
    let inner = profile
        .inner(&theta)
        .map_err(Error::InnerMaximizationFailed)?;
    let (value, gradient, hessian) = profile.profiled(&theta, &inner);
    let n = data.n() as f64;
    Ok(ProfiledValue {
        value: value - n * n.ln(),
        gradient,
        hessian,
        eta: inner.eta,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleSolution {
    pub eta: DVector<f64>,
    pub alpha: DVector<f64>,
    pub phi: DVector<f64>,
    pub q: Vec<f64>,
    /// `π(x_i; α̂)`.
    pub pi: Vec<f64>,
    /// `ℓ(η̂, α̂, φ̂)`.
    pub value: f64,
    pub alpha0_init: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    pub report: SolveReport,
}

fn uniform_feasible_start(prep: &Prepared, alpha_z: &DVector<f64>) -> Result<DVector<f64>> {
    let pi = pi_values(&prep.design_z, alpha_z)
        .ok_or_else(|| Error::InitialEstimatorFailed("π(x; α̂⁽⁰⁾) overflows".into()))?;
    let total: f64 = pi.iter().sum();
    let mut alpha = alpha_z.clone();
    alpha[0] -= (total / pi.len() as f64).ln();
    let w: Vec<f64> = pi.iter().map(|p| p / total).collect();
    let (phi, _) = weighted_moments(&prep.z, &w);
    Ok(DVector::from_iterator(
        alpha.len() + phi.len(),
        alpha.iter().chain(phi.iter()).copied(),
    ))
}

const OUTER_GRAD_TOL: f64 = 1e-6;
const OUTER_MAX_ITER: usize = 500;

fn saddle_prepared(prep: &Prepared, v: Option<&DMatrix<f64>>) -> Result<SaddleSolution> {
    let n = prep.b.nrows();
    let nf = n as f64;
    let k = prep.b.ncols();
    let alpha0_z = initial_alpha_standardized(prep)?;
    let alpha0 = prep.alpha_to_original(&alpha0_z);
    let pi0 = pi_values(&prep.design, &alpha0)
        .ok_or_else(|| Error::InitialEstimatorFailed("π(x; α̂⁽⁰⁾) overflows".into()))?;
    let w0: Vec<f64> = pi0.iter().map(|p| p / nf).collect();
    let sigma0 = weighted_sigma(&prep.b, &w0, &prep.phi_star);
    let v = match v {
        Some(v) => ridge_repair(v),
        None => sigma0.clone(),
    };
    let v_z = prep.basis_scaling.standardize_form(&v);
    let v_inv = v_z
        .cholesky()
        .ok_or_else(|| Error::InvalidModel("V must be positive definite".into()))?
        .inverse();

    let mut profile = Profile {
        design: &prep.design_z,
        b: &prep.z,
        phi_star: &prep.phi_star_z,
        v_inv: &v_inv,
        m: prep.m as f64,
        warm: DVector::zeros(k + 1),
        inner_cfg: NewtonConfig::default().with_max_iter(200),
    };
    let da = prep.design_z.ncols();
    let mut theta0 = DVector::from_iterator(
        da + k,
        alpha0_z.iter().chain(prep.phi_star_z.iter()).copied(),
    );
    if profile.inner(&theta0).is_err() {
        // φ̂* is outside the convex hull reachable at α̂⁽⁰⁾. Restart from the
        // point where uniform weights solve the inner problem: mean π = 1 and
        // φ the π-weighted basis mean.
        theta0 = uniform_feasible_start(prep, &alpha0_z)?;
        if let Err(e) = profile.inner(&theta0) {
            return Err(Error::InnerMaximizationFailed(format!(
                "at the initial estimate: {e}"
            )));
        }
    }
    let cfg = NewtonConfig::default()
        .with_grad_tol(OUTER_GRAD_TOL)
        .with_max_iter(OUTER_MAX_ITER);
    let (theta, mut report) = newton_maximize(&mut profile, theta0, &cfg).map_err(|e| match e {
        NewtonError::IllConditioned => Error::IllConditioned("profiled Hessian is singular".into()),
        NewtonError::Unbounded => Error::NotConverged("outer iterates diverged".into()),
        NewtonError::InvalidStart => {
            Error::InnerMaximizationFailed("at the initial estimate".into())
        }
    })?;
    let inner = profile
        .inner(&theta)
        .map_err(Error::InnerMaximizationFailed)?;
    let (alpha_z, phi_z) = profile.split(&theta);
    let value = inner.value + profile.penalty(&phi_z) - nf * nf.ln();
    report.objective = value;
    Ok(SaddleSolution {
        eta: prep.eta_to_original(&inner.eta),
        alpha: prep.alpha_to_original(&alpha_z),
        phi: prep.basis_scaling.invert_point(&phi_z),
        q: inner.q,
        pi: inner.hs.pi,
        value,
        alpha0_init: alpha0,
        sigma0,
        report,
    })
}

/// Solve the saddle-point problem with `V` (default `Σ̂⁽⁰⁾`), starting from
/// `η = 0`, `α = α̂⁽⁰⁾`, `φ = φ̂*`.
pub fn saddle_solve(
    data: &SourceDataset,
    model: &ShiftModel,
    basis: &BasisSpec,
    summary: &TargetSummary,
    v: Option<&DMatrix<f64>>,
) -> Result<SaddleSolution> {
    let prep = Prepared::new(data, model, basis, summary)?;
    saddle_prepared(&prep, v)
}

/// `Σ̂ = Σ_i q̂_i π(x_i; α̂) Φ_i Φ_iᵀ − φ̂ φ̂ᵀ`.
pub fn update_sigma(q: &[f64], pi: &[f64], b: &DMatrix<f64>, phi: &DVector<f64>) -> DMatrix<f64> {
    let w: Vec<f64> = q.iter().zip(pi).map(|(q, p)| q * p).collect();
    weighted_sigma(b, &w, phi)
}

/// Plug-in components shared by the variance estimator and the model check,
/// averaged with uniform source weights.
pub(crate) struct PlugIn {
    /// `n⁻¹ Σ h_i h_iᵀ`
    pub sigma_h: DMatrix<f64>,
    /// `n⁻¹ Σ ∂h_i/∂φ = [0; −π̄ I]`
    pub j_phi: DMatrix<f64>,
    /// `n⁻¹ Σ ∂h_i/∂α`
    pub j_alpha: DMatrix<f64>,
    pub h_mean: DVector<f64>,
    pub hs: HStack,
}

pub(crate) fn plug_in(
    design: &DMatrix<f64>,
    b: &DMatrix<f64>,
    alpha: &DVector<f64>,
    phi: &DVector<f64>,
) -> Option<PlugIn> {
    let (h_mean, j_alpha) = residual_and_jacobian(design, b, alpha, phi)?;
    let hs = h_stack(design, b, alpha, phi)?;
    let n = b.nrows();
    let k = b.ncols();
    let uniform = vec![1.0 / n as f64; n];
    let (_, sigma_h) = weighted_moments(&hs.h, &uniform);
    let pi_bar = hs.pi.iter().sum::<f64>() / n as f64;
    let mut j_phi = DMatrix::zeros(k + 1, k);
    for j in 0..k {
        j_phi[(1 + j, j)] = -pi_bar;
    }
    Some(PlugIn {
        sigma_h,
        j_phi,
        j_alpha,
        h_mean,
        hs,
    })
}

/// `Σ̂_h + (n/m) Ĵ_φ Σ Ĵ_φᵀ`, built symmetric.
pub(crate) fn weighting_matrix(pl: &PlugIn, sigma: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    let w = &pl.sigma_h + &pl.j_phi * sigma * pl.j_phi.transpose() * rho;
    (&w + w.transpose()) * 0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlexVariance {
    pub sigma2: f64,
    pub se: f64,
    pub sigma2_w: f64,
    /// `v̂ᵀ M⁻¹ v̂`, the amount subtracted from `σ̂²_w`.
    pub reduction: f64,
}

/// Plug-in variance `σ̂² = σ̂²_w − v̂ᵀ [[Ŵ, Ĵ_α], [Ĵ_αᵀ, 0]]⁻¹ v̂`.
#[allow(clippy::too_many_arguments)]
pub fn flex_variance_from_parts(
    y: &[f64],
    design: &DMatrix<f64>,
    b: &DMatrix<f64>,
    alpha: &DVector<f64>,
    phi: &DVector<f64>,
    sigma: &DMatrix<f64>,
    m: usize,
) -> Result<FlexVariance> {
    let n = y.len();
    let nf = n as f64;
    let k = b.ncols();
    let da = design.ncols();
    let pl = plug_in(design, b, alpha, phi)
        .ok_or_else(|| Error::InvalidModel("π(x; α) overflows".into()))?;
    let pi = &pl.hs.pi;

    let wy: Vec<f64> = (0..n).map(|i| pi[i] * y[i]).collect();
    let mean_wy = wy.iter().sum::<f64>() / nf;
    let sigma2_w = wy.iter().map(|v| v * v).sum::<f64>() / nf - mean_wy * mean_wy;

    let mut v = DVector::zeros(k + 1 + da);
    for i in 0..n {
        for a in 0..=k {
            v[a] += wy[i] * pl.hs.h[(i, a)];
        }
        for c in 0..da {
            v[k + 1 + c] += wy[i] * design[(i, c)];
        }
    }
    v /= nf;

    let w = weighting_matrix(&pl, sigma, nf / m as f64);
    let dim = k + 1 + da;
    let mut block = DMatrix::zeros(dim, dim);
    block.view_mut((0, 0), (k + 1, k + 1)).copy_from(&w);
    block
        .view_mut((0, k + 1), (k + 1, da))
        .copy_from(&pl.j_alpha);
    block
        .view_mut((k + 1, 0), (da, k + 1))
        .copy_from(&pl.j_alpha.transpose());

    let sv = block.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !(condition < 1e14) {
        return Err(Error::SingularVarianceSystem { condition });
    }
    let sol = block
        .lu()
        .solve(&v)
        .ok_or(Error::SingularVarianceSystem { condition })?;
    let reduction = v.dot(&sol);
    let sigma2 = sigma2_w - reduction;
    Ok(FlexVariance {
        sigma2,
        se: (sigma2.max(0.0) / nf).sqrt(),
        sigma2_w,
        reduction,
    })
}

/// Variance of `μ̂` for a completed fit.
pub fn flex_variance(
    fit: &FlexFit,
    data: &SourceDataset,
    model: &ShiftModel,
    basis: &BasisSpec,
    summary: &TargetSummary,
) -> Result<FlexVariance> {
    validate_pairing(basis, summary)?;
    let design = shift_design(model, data)?.design;
    let b = evaluate_basis(basis.terms(), data)?;
    flex_variance_from_parts(
        data.y(),
        &design,
        &b,
        &fit.alpha,
        &fit.phi,
        &fit.sigma_upd,
        summary.m,
    )
}

/// The flexible reweighting estimate `μ̂ = Σ q̂_i π(x_i; α̂) y_i` with its
/// plug-in variance.
pub fn flex_estimate(
    data: &SourceDataset,
    model: &ShiftModel,
    basis: &BasisSpec,
    summary: &TargetSummary,
) -> Result<FlexFit> {
    let prep = Prepared::new(data, model, basis, summary)?;
    let sol = saddle_prepared(&prep, None)?;
    if !sol.report.converged {
        return Err(Error::NotConverged(format!(
            "saddle point: {} outer iterations, gradient {:.3e}",
            sol.report.iterations, sol.report.final_grad_norm
        )));
    }
    let y = data.y();
    let mu = (0..y.len()).map(|i| sol.q[i] * sol.pi[i] * y[i]).sum();
    let sigma_upd = update_sigma(&sol.q, &sol.pi, &prep.b, &sol.phi);
    let var = flex_variance_from_parts(
        y,
        &prep.design,
        &prep.b,
        &sol.alpha,
        &sol.phi,
        &sigma_upd,
        prep.m,
    )?;
    Ok(FlexFit {
        eta: sol.eta,
        alpha: sol.alpha,
        phi: sol.phi,
        q: sol.q,
        alpha0_init: sol.alpha0_init,
        sigma0: sol.sigma0,
        sigma_upd,
        mu,
        sigma2: var.sigma2,
        se: var.se,
        sigma2_w: var.sigma2_w,
        variance_reduction_negative: var.reduction < 0.0,
        report: sol.report,
    })
}
