//! Independent oracles: bisection, grid search, and term-by-term
//! transcriptions of the plug-in formulas.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use transport_core::data::{BasisSpec, ShiftModel, SourceDataset, TargetSummary};
use transport_core::eb::{eb_estimate, solve_eb_weights};
use transport_core::flex::{
    flex_estimate, flex_variance_from_parts, initial_sigma, saddle_solve, shift_design,
    update_sigma,
};
use transport_core::model_check::{specification_test, w_rho_hat};
use transport_core::numerics::chi2_sf;

use super::{basis_matrix, continuous_instance, random_instance, rel_err, rel_err_mat, rng};

/// Weighted mean of `b − φ` under weights `∝ exp{λ(b − φ)}`; increasing in λ.
fn tilted_mean(b: &[f64], phi: f64, lambda: f64) -> f64 {
    let s: Vec<f64> = b.iter().map(|v| lambda * (v - phi)).collect();
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (v, si) in b.iter().zip(&s) {
        let w = (si - max).exp();
        num += w * (v - phi);
        den += w;
    }
    num / den
}

fn bisect(b: &[f64], phi: f64) -> f64 {
    let (mut lo, mut hi) = (-1.0, 1.0);
    while tilted_mean(b, phi, lo) > 0.0 {
        lo *= 2.0;
    }
    while tilted_mean(b, phi, hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if tilted_mean(b, phi, mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Largest `|λ̂ − λ_bisect|` over scalar instances.
pub fn eb_bisection_error(instances: u64) -> f64 {
    let basis = BasisSpec::parse("x").unwrap();
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut r = rng(seed);
        let n = r.random_range(5..200);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..3.0)).collect();
        let (lo, hi) = x
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                (a.min(*v), b.max(*v))
            });
        let phi = lo + (hi - lo) * r.random_range(0.15..0.85);
        let rows: Vec<Vec<f64>> = x.iter().map(|v| vec![*v]).collect();
        let data = SourceDataset::from_rows(vec![0.0; n], &rows, &["x"]).unwrap();
        let summary = TargetSummary::for_basis(&basis, vec![phi], 50).unwrap();
        let lambda =
            solve_eb_weights(&data, &basis, &summary).map_or(f64::INFINITY, |w| w.lambda[0]);
        worst = worst.max((lambda - bisect(&x, phi)).abs());
    }
    worst
}

struct GridProblem {
    b: DMatrix<f64>,
    x1: Vec<f64>,
    phi_star: DVector<f64>,
    v_inv: DMatrix<f64>,
    m: f64,
}

impl GridProblem {
    /// `max_η −n log Σ exp(ηᵀh_i)` by a plain damped Newton ascent, or `+∞`
    /// when the ascent escapes.
    fn inner(&self, alpha: [f64; 2], phi: &DVector<f64>) -> f64 {
        let n = self.b.nrows();
        let k = self.b.ncols();
        let h: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let pi = (alpha[0] + alpha[1] * self.x1[i]).exp();
                let mut row = vec![pi - 1.0];
                row.extend((0..k).map(|j| pi * (self.b[(i, j)] - phi[j])));
                row
            })
            .collect();
        let val = |eta: &DVector<f64>| {
            let s: Vec<f64> = h
                .iter()
                .map(|r| r.iter().zip(eta.iter()).map(|(a, b)| a * b).sum())
                .collect();
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            -(n as f64) * (max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
        };
        let mut eta = DVector::zeros(k + 1);
        let mut f = val(&eta);
        for _ in 0..200 {
            let s: Vec<f64> = h
                .iter()
                .map(|r| r.iter().zip(eta.iter()).map(|(a, b)| a * b).sum())
                .collect();
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
            let tot: f64 = w.iter().sum();
            let mut mean = DVector::zeros(k + 1);
            let mut sec = DMatrix::zeros(k + 1, k + 1);
            for (i, r) in h.iter().enumerate() {
                let rv = DVector::from_column_slice(r);
                mean += &rv * (w[i] / tot);
                sec += &rv * rv.transpose() * (w[i] / tot);
            }
            let cov = sec - &mean * mean.transpose();
            let Some(step) = (cov * n as f64 + DMatrix::identity(k + 1, k + 1) * 1e-9)
                .try_inverse()
                .map(|ci| ci * (&mean * -(n as f64)))
            else {
                return f64::INFINITY;
            };
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-12 {
                let cand = &eta + &step * t;
                let fc = val(&cand);
                if fc >= f - 1e-12 * f.abs() {
                    eta = cand;
                    f = fc;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if mean.amax() * (n as f64) < 1e-9 {
                return f;
            }
            if !moved || eta.amax() > 1e4 {
                break;
            }
        }
        // The supremum is not attained (0 outside the convex hull of the h_i).
        f64::INFINITY
    }

    fn value(&self, theta: &[f64; 4]) -> f64 {
        let phi = DVector::from_column_slice(&theta[2..]);
        let d = &self.phi_star - &phi;
        self.inner([theta[0], theta[1]], &phi)
            + 0.5 * self.m * (d.transpose() * &self.v_inv * &d)[0]
    }

    /// Coarse-to-fine grid search over `(α₀, α₁, φ₁, φ₂)`.
    fn grid_min(&self, centre: [f64; 4], width: [f64; 4], levels: usize) -> (f64, [f64; 4]) {
        const P: i32 = 7;
        let (mut c, mut w) = (centre, width);
        let mut best = f64::INFINITY;
        for _ in 0..levels {
            let mut arg = c;
            for i0 in 0..P {
                for i1 in 0..P {
                    for i2 in 0..P {
                        for i3 in 0..P {
                            let idx = [i0, i1, i2, i3];
                            let mut t = [0.0; 4];
                            for d in 0..4 {
                                t[d] = c[d] + w[d] * (2.0 * idx[d] as f64 / (P - 1) as f64 - 1.0);
                            }
                            let v = self.value(&t);
                            if v < best {
                                best = v;
                                arg = t;
                            }
                        }
                    }
                }
            }
            c = arg;
            for d in w.iter_mut() {
                *d *= 0.6;
            }
        }
        (best, c)
    }
}

/// Largest `|saddle value − grid minimum|` over `n = 20` instances.
pub fn saddle_grid_error(instances: u64) -> f64 {
    let basis = BasisSpec::parse("x1 + x2").unwrap();
    let model = ShiftModel::parse("x1").unwrap();
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let data = continuous_instance(seed, 20);
        let b = basis_matrix(&basis, &data);
        let x1: Vec<f64> = data.column("x1").unwrap().iter().copied().collect();
        // Target moments from exponentially tilted source weights.
        let w: Vec<f64> = x1.iter().map(|v| (0.4 * v).exp()).collect();
        let tot: f64 = w.iter().sum();
        let phi: Vec<f64> = (0..2)
            .map(|j| (0..20).map(|i| w[i] * b[(i, j)]).sum::<f64>() / tot + 0.02)
            .collect();
        let summary = TargetSummary::for_basis(&basis, phi.clone(), 30).unwrap();
        let Ok(sol) = saddle_solve(&data, &model, &basis, &summary, None) else {
            return f64::INFINITY;
        };
        let problem = GridProblem {
            b,
            x1,
            phi_star: DVector::from_vec(phi.clone()),
            v_inv: sol.sigma0.clone().try_inverse().unwrap(),
            m: 30.0,
        };
        // Restarted zooms walk along narrow valleys that one zoom can miss.
        let (mut grid, mut arg) =
            problem.grid_min([0.0, 0.0, phi[0], phi[1]], [2.0, 2.0, 0.5, 0.5], 40);
        for _ in 0..8 {
            (grid, arg) = problem.grid_min(arg, [0.3, 0.3, 0.1, 0.1], 30);
        }
        worst = worst.max((sol.value - grid).abs());
    }
    worst
}

fn eb_sigma2_transcription(
    p: &[f64],
    mu: f64,
    y: &[f64],
    b: &DMatrix<f64>,
    phi: &[f64],
    m: usize,
) -> f64 {
    let n = y.len();
    let k = phi.len();
    let mut sig = DMatrix::<f64>::zeros(k, k);
    let mut a = DMatrix::<f64>::zeros(k, k);
    let mut c = DVector::<f64>::zeros(k);
    for i in 0..n {
        for r in 0..k {
            c[r] += p[i] * y[i] * (b[(i, r)] - phi[r]);
            for s in 0..k {
                sig[(r, s)] += p[i] * b[(i, r)] * b[(i, s)];
                a[(r, s)] += p[i] * (b[(i, r)] - phi[r]) * (b[(i, s)] - phi[s]);
            }
        }
    }
    for r in 0..k {
        for s in 0..k {
            sig[(r, s)] -= phi[r] * phi[s];
        }
    }
    let omega = a.try_inverse().unwrap() * c;
    let mut u = vec![0.0; n];
    for i in 0..n {
        let pi = n as f64 * p[i];
        let mut proj = 0.0;
        for r in 0..k {
            proj += omega[r] * (b[(i, r)] - phi[r]);
        }
        u[i] = pi * y[i] - mu - mu * (pi - 1.0) - pi * proj;
    }
    let ub = u.iter().sum::<f64>() / n as f64;
    let s2u = u.iter().map(|v| (v - ub).powi(2)).sum::<f64>() / n as f64;
    let mut quad = 0.0;
    for r in 0..k {
        for s in 0..k {
            quad += omega[r] * sig[(r, s)] * omega[s];
        }
    }
    s2u + n as f64 / m as f64 * quad
}

/// Relative error of `σ̂²_EB` against its transcription on `n = 6` instances.
pub fn eb_variance_error(instances: u64) -> f64 {
    let basis = BasisSpec::parse("x1 + x2").unwrap();
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let data = continuous_instance(seed, 6);
        let b = basis_matrix(&basis, &data);
        let phi: Vec<f64> = (0..2).map(|j| b.column(j).mean() + 0.05).collect();
        let summary = TargetSummary::for_basis(&basis, phi.clone(), 9).unwrap();
        let fit = eb_estimate(&data, &basis, &summary).unwrap();
        let oracle = eb_sigma2_transcription(&fit.p, fit.mu, data.y(), &b, &phi, 9);
        worst = worst.max(rel_err(fit.sigma2, oracle));
    }
    worst
}

fn flex_sigma2_transcription(
    y: &[f64],
    t: &[Vec<f64>],
    b: &DMatrix<f64>,
    alpha: &[f64],
    phi: &[f64],
    sigma: &DMatrix<f64>,
    m: usize,
) -> f64 {
    let n = y.len();
    let nf = n as f64;
    let k = phi.len();
    let da = alpha.len();
    let pi: Vec<f64> = (0..n)
        .map(|i| (0..da).map(|c| alpha[c] * t[i][c]).sum::<f64>().exp())
        .collect();
    let h = |i: usize, a: usize| {
        if a == 0 {
            pi[i] - 1.0
        } else {
            pi[i] * (b[(i, a - 1)] - phi[a - 1])
        }
    };
    let dh_dalpha = |i: usize, a: usize, c: usize| {
        if a == 0 {
            pi[i] * t[i][c]
        } else {
            pi[i] * t[i][c] * (b[(i, a - 1)] - phi[a - 1])
        }
    };
    let s1: f64 = (0..n).map(|i| (pi[i] * y[i]).powi(2)).sum::<f64>() / nf;
    let s0: f64 = (0..n).map(|i| pi[i] * y[i]).sum::<f64>() / nf;
    let sigma2_w = s1 - s0 * s0;

    let dim = k + 1 + da;
    let mut big = DMatrix::<f64>::zeros(dim, dim);
    for a in 0..=k {
        for c in 0..=k {
            big[(a, c)] = (0..n).map(|i| h(i, a) * h(i, c)).sum::<f64>() / nf;
        }
    }
    let pibar = pi.iter().sum::<f64>() / nf;
    // Ĵ_φ Σ Ĵ_φᵀ has only the lower-right block π̄² Σ.
    for a in 0..k {
        for c in 0..k {
            big[(a + 1, c + 1)] += nf / m as f64 * pibar * pibar * sigma[(a, c)];
        }
    }
    for a in 0..=k {
        for c in 0..da {
            let j = (0..n).map(|i| dh_dalpha(i, a, c)).sum::<f64>() / nf;
            big[(a, k + 1 + c)] = j;
            big[(k + 1 + c, a)] = j;
        }
    }
    let mut v = DVector::<f64>::zeros(dim);
    for a in 0..=k {
        v[a] = (0..n).map(|i| y[i] * pi[i] * h(i, a)).sum::<f64>() / nf;
    }
    for c in 0..da {
        v[k + 1 + c] = (0..n).map(|i| y[i] * pi[i] * t[i][c]).sum::<f64>() / nf;
    }
    let inv = big.try_inverse().unwrap();
    sigma2_w - (v.transpose() * inv * &v)[0]
}

/// Relative error of `σ̂²` against its transcription on `n = 8` instances.
pub fn flex_variance_error(instances: u64) -> f64 {
    let basis = BasisSpec::parse("x1 + x2").unwrap();
    let model = ShiftModel::parse("x1").unwrap();
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let data = continuous_instance(seed, 8);
        let b = basis_matrix(&basis, &data);
        let design = shift_design(&model, &data).unwrap().design;
        let mut r = rng(50 + seed);
        let alpha = vec![r.random_range(-0.3..0.3), r.random_range(-0.5..0.5)];
        let phi: Vec<f64> = (0..2)
            .map(|j| b.column(j).mean() + r.random_range(-0.1..0.1))
            .collect();
        let a = DMatrix::from_fn(2, 2, |_, _| r.random_range(-1.0..1.0));
        let sigma = &a * a.transpose() + DMatrix::identity(2, 2) * 0.1;
        let got = flex_variance_from_parts(
            data.y(),
            &design,
            &b,
            &DVector::from_vec(alpha.clone()),
            &DVector::from_vec(phi.clone()),
            &sigma,
            12,
        )
        .unwrap();
        let t: Vec<Vec<f64>> = (0..8).map(|i| vec![1.0, data.x()[(i, 0)]]).collect();
        let oracle = flex_sigma2_transcription(data.y(), &t, &b, &alpha, &phi, &sigma, 12);
        worst = worst.max(rel_err(got.sigma2, oracle));
    }
    worst
}

/// Relative error of `Σ̂⁽⁰⁾` and `Σ̂` against their transcriptions.
pub fn sigma_error(instances: u64) -> f64 {
    let basis = BasisSpec::parse("x1 + x2 + x1^2").unwrap();
    let model = ShiftModel::parse("x1 + x2").unwrap();
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let data = continuous_instance(seed, 15);
        let b = basis_matrix(&basis, &data);
        let mut r = rng(70 + seed);
        let mut alpha = [0.0, r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)];
        let raw: Vec<f64> = (0..15)
            .map(|i| (alpha[1] * data.x()[(i, 0)] + alpha[2] * data.x()[(i, 1)]).exp())
            .collect();
        // Normalized so that mean π = 1; φ near the π-weighted mean keeps
        // Σ̂⁽⁰⁾ comfortably positive definite.
        alpha[0] = -(raw.iter().sum::<f64>() / 15.0).ln();
        let pi: Vec<f64> = raw.iter().map(|v| v * alpha[0].exp()).collect();
        let phi: Vec<f64> = (0..3)
            .map(|j| {
                (0..15).map(|i| pi[i] * b[(i, j)]).sum::<f64>() / 15.0 + r.random_range(-0.01..0.01)
            })
            .collect();
        let summary = TargetSummary::for_basis(&basis, phi.clone(), 20).unwrap();

        let got = initial_sigma(
            &data,
            &model,
            &basis,
            &DVector::from_row_slice(&alpha),
            &summary,
        )
        .unwrap();
        let oracle = DMatrix::from_fn(3, 3, |a, c| {
            (0..15).map(|i| pi[i] * b[(i, a)] * b[(i, c)]).sum::<f64>() / 15.0 - phi[a] * phi[c]
        });
        worst = worst.max(rel_err_mat(&got, &oracle));

        let q: Vec<f64> = {
            let raw: Vec<f64> = (0..15).map(|_| r.random_range(0.5..1.5)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        };
        let got = update_sigma(&q, &pi, &b, &DVector::from_vec(phi.clone()));
        let oracle = DMatrix::from_fn(3, 3, |a, c| {
            (0..15)
                .map(|i| q[i] * pi[i] * b[(i, a)] * b[(i, c)])
                .sum::<f64>()
                - phi[a] * phi[c]
        });
        worst = worst.max(rel_err_mat(&got, &oracle));
    }
    worst
}

/// Relative errors of `Ŵ_ρ` and of `(T, p)` against transcriptions, with
/// `df = 2` so that the χ² tail is `exp(−T/2)`.
pub fn model_check_errors(instances: u64) -> (f64, f64) {
    let basis = BasisSpec::parse("x1 + x2 + x3 + x1^2").unwrap();
    let model = ShiftModel::parse("x1 + x2").unwrap();
    let (mut worst_w, mut worst_t) = (0.0f64, 0.0f64);
    for seed in 0..instances {
        let (data, summary) = random_instance(seed, 150, 100, &basis);
        let fit = flex_estimate(&data, &model, &basis, &summary).unwrap();
        let b = basis_matrix(&basis, &data);
        let n = data.n();
        let nf = n as f64;
        let phi = &summary.phi_hat;
        let pi: Vec<f64> = (0..n)
            .map(|i| {
                (fit.alpha[0] + fit.alpha[1] * data.x()[(i, 0)] + fit.alpha[2] * data.x()[(i, 1)])
                    .exp()
            })
            .collect();
        let h = |i: usize, a: usize| {
            if a == 0 {
                pi[i] - 1.0
            } else {
                pi[i] * (b[(i, a - 1)] - phi[a - 1])
            }
        };
        let pibar = pi.iter().sum::<f64>() / nf;
        let w = DMatrix::from_fn(5, 5, |a, c| {
            let mut v = (0..n).map(|i| h(i, a) * h(i, c)).sum::<f64>() / nf;
            if a > 0 && c > 0 {
                v += nf / summary.m as f64 * pibar * pibar * fit.sigma_upd[(a - 1, c - 1)];
            }
            v
        });
        let got_w = w_rho_hat(&fit, &data, &model, &basis, &summary).unwrap();
        worst_w = worst_w.max(rel_err_mat(&got_w, &w));

        let hbar = DVector::from_fn(5, |a, _| (0..n).map(|i| h(i, a)).sum::<f64>() / nf);
        let t = nf * (hbar.transpose() * w.try_inverse().unwrap() * &hbar)[0];
        let got = specification_test(&fit, &data, &model, &basis, &summary).unwrap();
        assert_eq!(got.df, 2);
        worst_t = worst_t
            .max(rel_err(got.t, t))
            .max(rel_err(got.p_value, chi2_sf(t, 2)))
            .max(rel_err(got.p_value, (-t / 2.0).exp()));
    }
    (worst_w, worst_t)
}
