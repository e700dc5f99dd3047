//! Invariants that must hold on every successful fit. Each check returns
//! `Ok(())` when the estimator declines the instance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use transport_core::data::{BasisSpec, FlexFit, ShiftModel, SourceDataset, TargetSummary};
use transport_core::eb::{augmented_eb_estimate, eb_estimate};
use transport_core::flex::{flex_estimate, shift_design};
use transport_core::model_check::specification_test;
use transport_core::simulation::{run_monte_carlo, MonteCarloSpec, SimScenario, DEFAULT_BASIS};

use super::{basis_matrix, random_instance, rel_err, rng};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn basis() -> BasisSpec {
    BasisSpec::parse(DEFAULT_BASIS).unwrap()
}

fn model() -> ShiftModel {
    ShiftModel::parse("x1 + x2 + x3").unwrap()
}

/// Summary equal to the source sample moments.
fn no_shift_summary(data: &SourceDataset, basis: &BasisSpec) -> TargetSummary {
    let b = basis_matrix(basis, data);
    let phi = (0..b.ncols()).map(|j| b.column(j).mean()).collect();
    TargetSummary::for_basis(basis, phi, 200).unwrap()
}

/// Replace the basis `Φ` by `AΦ + c`, materialized as new columns `u1..uK`
/// next to the raw covariates so that the shift model is untouched.
fn reparameterize(
    data: &SourceDataset,
    basis: &BasisSpec,
    summary: &TargetSummary,
    a: &DMatrix<f64>,
    c: &DVector<f64>,
) -> (SourceDataset, BasisSpec, TargetSummary) {
    let b = basis_matrix(basis, data);
    let k = b.ncols();
    let mut u = &b * a.transpose();
    for mut row in u.row_iter_mut() {
        row += c.transpose();
    }
    let x = DMatrix::from_fn(data.n(), data.x().ncols() + k, |i, j| {
        if j < data.x().ncols() {
            data.x()[(i, j)]
        } else {
            u[(i, j - data.x().ncols())]
        }
    });
    let labels: Vec<String> = (1..=k).map(|j| format!("u{j}")).collect();
    let mut names = data.var_names().to_vec();
    names.extend(labels.iter().cloned());
    let new_data = SourceDataset::new(data.y().to_vec(), x, names).unwrap();
    let new_basis = BasisSpec::parse(&labels.join(" + ")).unwrap();
    let phi = a * DVector::from_column_slice(&summary.phi_hat) + c;
    let new_summary =
        TargetSummary::for_basis(&new_basis, phi.as_slice().to_vec(), summary.m).unwrap();
    (new_data, new_basis, new_summary)
}

fn mixing_matrix(seed: u64, k: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut r = rng(seed);
    let a = DMatrix::from_fn(k, k, |i, j| {
        r.random_range(-1.0..1.0) + if i == j { 2.5 } else { 0.0 }
    });
    let c = DVector::from_fn(k, |_, _| r.random_range(-3.0..3.0));
    (a, c)
}

/// Per-column rescaling. `Σ̂⁽⁰⁾` is an uncentred second moment, so the
/// fitted `α̂` follows translations and column mixing only approximately.
fn rescaling(seed: u64, k: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut r = rng(seed);
    let d = DVector::from_fn(k, |_, _| {
        let s: f64 = r.random_range(0.2..5.0);
        if r.random::<bool>() {
            s
        } else {
            -s
        }
    });
    (DMatrix::from_diagonal(&d), DVector::zeros(k))
}

/// Invariances are exact only when `Σ̂⁽⁰⁾` needed no ridge repair, since
/// adding a multiple of the identity does not commute with rescaling.
fn unrepaired(fit: &FlexFit) -> bool {
    let eig = fit.sigma0.clone().symmetric_eigen().eigenvalues;
    eig.min() > 1e-6 * eig.sum() / eig.len() as f64
}

fn permute_rows(data: &SourceDataset, perm: &[usize]) -> SourceDataset {
    let x = DMatrix::from_fn(data.n(), data.x().ncols(), |i, j| data.x()[(perm[i], j)]);
    let y = perm.iter().map(|&i| data.y()[i]).collect();
    SourceDataset::new(y, x, data.var_names().to_vec()).unwrap()
}

pub fn eb_feasibility(seed: u64, n: usize, m: usize) -> Check {
    let basis = basis();
    let (data, summary) = random_instance(seed, n, m, &basis);
    let Ok(fit) = eb_estimate(&data, &basis, &summary) else {
        return Ok(());
    };
    let b = basis_matrix(&basis, &data);
    ensure!(fit.p.iter().all(|&p| p > 0.0), "non-positive weight");
    let total = fit.p.iter().sum::<f64>();
    ensure!((total - 1.0).abs() <= 1e-12, "weights sum to {total}");
    for j in 0..b.ncols() {
        let r: f64 = (0..n)
            .map(|i| fit.p[i] * (b[(i, j)] - summary.phi_hat[j]))
            .sum();
        ensure!(r.abs() <= 1e-8, "balance residual {r} in coordinate {j}");
    }
    ensure!(fit.sigma2 > 0.0, "σ̂² = {}", fit.sigma2);
    Ok(())
}

pub fn eb_no_shift(seed: u64, n: usize) -> Check {
    let basis = basis();
    let (data, _) = random_instance(seed, n, 50, &basis);
    let fit =
        eb_estimate(&data, &basis, &no_shift_summary(&data, &basis)).map_err(|e| e.to_string())?;
    ensure!(fit.lambda.amax() <= 1e-8, "λ̂ = {}", fit.lambda);
    let nf = n as f64;
    ensure!(
        fit.p.iter().all(|&p| (p - 1.0 / nf).abs() <= 1e-10),
        "non-uniform weights"
    );
    ensure!(
        (fit.mu - data.mean_y()).abs() <= 1e-12,
        "μ̂ = {} vs ȳ = {}",
        fit.mu,
        data.mean_y()
    );
    Ok(())
}

pub fn eb_affine(seed: u64, n: usize, m: usize) -> Check {
    let basis = basis();
    let (data, summary) = random_instance(seed, n, m, &basis);
    let Ok(fit) = eb_estimate(&data, &basis, &summary) else {
        return Ok(());
    };
    let (a, c) = mixing_matrix(seed ^ 0xaff1, basis.k());
    let (d2, b2, s2) = reparameterize(&data, &basis, &summary, &a, &c);
    let fit2 = eb_estimate(&d2, &b2, &s2).map_err(|e| e.to_string())?;
    for (p, p2) in fit.p.iter().zip(&fit2.p) {
        ensure!((p - p2).abs() <= 1e-10 * p.max(1.0), "weight {p} vs {p2}");
    }
    ensure!(
        (fit.mu - fit2.mu).abs() <= 1e-10 * (1.0 + fit.mu.abs()),
        "μ̂ {} vs {}",
        fit.mu,
        fit2.mu
    );
    Ok(())
}

pub fn eb_permutation(seed: u64, n: usize) -> Check {
    let basis = basis();
    let (data, summary) = random_instance(seed, n, 100, &basis);
    let Ok(fit) = eb_estimate(&data, &basis, &summary) else {
        return Ok(());
    };
    let mut perm: Vec<usize> = (0..n).collect();
    perm.reverse();
    perm.rotate_left(seed as usize % n);
    let fit2 =
        eb_estimate(&permute_rows(&data, &perm), &basis, &summary).map_err(|e| e.to_string())?;
    ensure!(
        (fit.mu - fit2.mu).abs() <= 1e-10 * (1.0 + fit.mu.abs()),
        "μ̂ {} vs {}",
        fit.mu,
        fit2.mu
    );
    ensure!(
        (fit.se - fit2.se).abs() <= 1e-8 * fit.se,
        "SE {} vs {}",
        fit.se,
        fit2.se
    );
    Ok(())
}

pub fn flex_feasibility(seed: u64, n: usize, m: usize) -> Check {
    let basis = basis();
    let (data, summary) = random_instance(seed, n, m, &basis);
    let Ok(fit) = flex_estimate(&data, &model(), &basis, &summary) else {
        return Ok(());
    };
    let b = basis_matrix(&basis, &data);
    let pi = shift_design(&model(), &data)
        .unwrap()
        .pi(&fit.alpha)
        .unwrap();
    ensure!(fit.q.iter().all(|&q| q > 0.0), "non-positive weight");
    let total = fit.q.iter().sum::<f64>();
    ensure!((total - 1.0).abs() <= 1e-12, "weights sum to {total}");
    let mut moment = DVector::<f64>::zeros(b.ncols() + 1);
    for i in 0..data.n() {
        moment[0] += fit.q[i] * (pi[i] - 1.0);
        for j in 0..b.ncols() {
            moment[j + 1] += fit.q[i] * pi[i] * (b[(i, j)] - fit.phi[j]);
        }
    }
    ensure!(
        moment.amax() <= 1e-8,
        "constraint residual {}",
        moment.amax()
    );
    ensure!(
        fit.sigma2 <= fit.sigma2_w || fit.variance_reduction_negative,
        "σ̂² {} exceeds σ̂²_w {}",
        fit.sigma2,
        fit.sigma2_w
    );
    Ok(())
}

pub fn flex_no_shift(seed: u64, n: usize) -> Check {
    let basis = basis();
    let (data, _) = random_instance(seed, n, 50, &basis);
    let summary = no_shift_summary(&data, &basis);
    let fit = flex_estimate(&data, &model(), &basis, &summary).map_err(|e| e.to_string())?;
    ensure!(fit.alpha.amax() <= 1e-8, "α̂ = {}", fit.alpha);
    ensure!(fit.eta.amax() <= 1e-8, "η̂ = {}", fit.eta);
    let phi_star = DVector::from_column_slice(&summary.phi_hat);
    ensure!((&fit.phi - phi_star).amax() <= 1e-8, "φ̂ = {}", fit.phi);
    ensure!(
        (fit.mu - data.mean_y()).abs() <= 1e-8,
        "μ̂ = {} vs ȳ = {}",
        fit.mu,
        data.mean_y()
    );
    Ok(())
}

pub fn augmented_no_shift(seed: u64, n: usize) -> Check {
    let basis = basis();
    let (data, _) = random_instance(seed, n, 50, &basis);
    let summary = no_shift_summary(&data, &basis);
    let v = DMatrix::identity(basis.k(), basis.k());
    let fit = augmented_eb_estimate(&data, &basis, &summary, &v).map_err(|e| e.to_string())?;
    let phi_star = DVector::from_column_slice(&summary.phi_hat);
    ensure!(
        (&fit.phi_eb - phi_star).amax() <= 1e-8,
        "φ_EB = {}",
        fit.phi_eb
    );
    ensure!(fit.lambda_eb.amax() <= 1e-8, "λ = {}", fit.lambda_eb);
    ensure!(
        fit.p.iter().all(|&p| (p - 1.0 / n as f64).abs() <= 1e-10),
        "non-uniform weights"
    );
    ensure!(
        (fit.mu - data.mean_y()).abs() <= 1e-8,
        "μ̃ = {} vs ȳ = {}",
        fit.mu,
        data.mean_y()
    );
    Ok(())
}

pub fn augmented_feasibility(seed: u64, n: usize, m: usize) -> Check {
    let basis = basis();
    let (data, summary) = random_instance(seed, n, m, &basis);
    let v = DMatrix::identity(basis.k(), basis.k());
    let Ok(fit) = augmented_eb_estimate(&data, &basis, &summary, &v) else {
        return Ok(());
    };
    let b = basis_matrix(&basis, &data);
    ensure!(fit.p.iter().all(|&p| p > 0.0), "non-positive weight");
    let total = fit.p.iter().sum::<f64>();
    ensure!((total - 1.0).abs() <= 1e-12, "weights sum to {total}");
    for j in 0..b.ncols() {
        let r: f64 = (0..n).map(|i| fit.p[i] * (b[(i, j)] - fit.phi_eb[j])).sum();
        ensure!(r.abs() <= 1e-8, "balance residual {r} in coordinate {j}");
    }
    Ok(())
}

fn close_statistic(t: f64, t2: f64) -> bool {
    rel_err(t, t2) <= 1e-8 || (t - t2).abs() <= 1e-12
}

pub fn flex_rescaling(seed: u64, n: usize, m: usize) -> Check {
    let basis = basis();
    let (data, summary) = random_instance(seed, n, m, &basis);
    let Ok(fit) = flex_estimate(&data, &model(), &basis, &summary) else {
        return Ok(());
    };
    if !unrepaired(&fit) {
        return Ok(());
    }
    let t =
        specification_test(&fit, &data, &model(), &basis, &summary).map_err(|e| e.to_string())?;
    let (a, c) = rescaling(seed ^ 0xd1a6, basis.k());
    let (d2, b2, s2) = reparameterize(&data, &basis, &summary, &a, &c);
    let fit2 = flex_estimate(&d2, &model(), &b2, &s2).map_err(|e| e.to_string())?;
    let t2 = specification_test(&fit2, &d2, &model(), &b2, &s2).map_err(|e| e.to_string())?;
    ensure!(
        (fit.mu - fit2.mu).abs() <= 1e-8 * (1.0 + fit.mu.abs()),
        "μ̂ {} vs {}",
        fit.mu,
        fit2.mu
    );
    ensure!(close_statistic(t.t, t2.t), "T {} vs {}", t.t, t2.t);
    Ok(())
}

pub fn statistic_mixing_at_fixed_fit(seed: u64, n: usize, m: usize) -> Check {
    let basis = basis();
    let (data, summary) = random_instance(seed, n, m, &basis);
    let Ok(fit) = flex_estimate(&data, &model(), &basis, &summary) else {
        return Ok(());
    };
    let t =
        specification_test(&fit, &data, &model(), &basis, &summary).map_err(|e| e.to_string())?;
    let (a, c) = mixing_matrix(seed ^ 0x7e57, basis.k());
    let (d2, b2, s2) = reparameterize(&data, &basis, &summary, &a, &c);
    let mut fit2 = fit.clone();
    fit2.sigma_upd = &a * &fit.sigma_upd * a.transpose();
    fit2.phi = &a * &fit.phi + &c;
    let t2 = specification_test(&fit2, &d2, &model(), &b2, &s2).map_err(|e| e.to_string())?;
    ensure!(close_statistic(t.t, t2.t), "T {} vs {}", t.t, t2.t);
    ensure!(
        (0.0..=1.0).contains(&t2.p_value) && t2.t >= 0.0,
        "T {} p {}",
        t2.t,
        t2.p_value
    );
    Ok(())
}

pub fn flex_permutation(seed: u64, n: usize) -> Check {
    let basis = basis();
    let (data, summary) = random_instance(seed, n, 100, &basis);
    let Ok(fit) = flex_estimate(&data, &model(), &basis, &summary) else {
        return Ok(());
    };
    if !unrepaired(&fit) {
        return Ok(());
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.rotate_left(1 + seed as usize % (n - 1));
    let fit2 = flex_estimate(&permute_rows(&data, &perm), &model(), &basis, &summary)
        .map_err(|e| e.to_string())?;
    ensure!(
        (fit.mu - fit2.mu).abs() <= 1e-8 * (1.0 + fit.mu.abs()),
        "μ̂ {} vs {}",
        fit.mu,
        fit2.mu
    );
    Ok(())
}

/// Reports from 1, 2 and 5 worker threads agree bit for bit.
pub fn simulation_determinism(cfg: &SimScenario) -> Check {
    let spec = MonteCarloSpec::standard(cfg.scenario).with_model_check();
    let runs: Vec<_> = [1, 2, 5]
        .into_iter()
        .map(|w| run_monte_carlo(cfg, &spec, w).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let key = |r: &transport_core::simulation::SimReport| {
        let bits: Vec<Vec<Option<(u64, u64)>>> = r
            .replications
            .iter()
            .map(|rec| {
                rec.estimates
                    .iter()
                    .map(|e| e.map(|e| (e.estimate.to_bits(), e.se.to_bits())))
                    .collect()
            })
            .collect();
        (
            serde_json::to_string(r).unwrap(),
            bits,
            r.p_values().iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
        )
    };
    let first = key(&runs[0]);
    for r in &runs[1..] {
        ensure!(key(r) == first, "reports differ across worker counts");
    }
    Ok(())
}
