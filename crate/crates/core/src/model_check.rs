//! Over-identification test of the shift model.
//!
//! At the fitted `α̂` and the reported summary `φ̂*`, the statistic
//! `T = n h_n(α̂, φ̂*)ᵀ Ŵ⁻¹ h_n(α̂, φ̂*)` is compared to a χ² distribution with
//! `K + 1 − dim(α)` degrees of freedom.

use nalgebra::{DMatrix, DVector};

use crate::basis::evaluate_basis;
use crate::data::{
    validate_pairing, BasisSpec, FlexFit, ModelCheckResult, ShiftModel, SourceDataset,
    TargetSummary,
};
use crate::error::{Error, Result};
use crate::flex::{plug_in, shift_design, weighting_matrix};
use crate::numerics::{chi2_sf, floored_spd_inverse};

const EIGEN_FLOOR: f64 = 1e-12;

struct Parts {
    w: DMatrix<f64>,
    h_mean: DVector<f64>,
}

fn parts(
    fit: &FlexFit,
    data: &SourceDataset,
    model: &ShiftModel,
    basis: &BasisSpec,
    summary: &TargetSummary,
) -> Result<Parts> {
    validate_pairing(basis, summary)?;
    let design = shift_design(model, data)?.design;
    let b = evaluate_basis(basis.terms(), data)?;
    let phi_star = DVector::from_column_slice(&summary.phi_hat);
    let pl = plug_in(&design, &b, &fit.alpha, &phi_star)
        .ok_or_else(|| Error::InvalidModel("π(x; α) overflows".into()))?;
    let rho = data.n() as f64 / summary.m as f64;
    Ok(Parts {
        w: weighting_matrix(&pl, &fit.sigma_upd, rho),
        h_mean: pl.h_mean,
    })
}

/// `Ŵ_ρ = n⁻¹ Σ h_i h_iᵀ + (n/m) Ĵ_φ Σ̂ Ĵ_φᵀ` at `(α̂, φ̂*)`.
pub fn w_rho_hat(
    fit: &FlexFit,
    data: &SourceDataset,
    model: &ShiftModel,
    basis: &BasisSpec,
    summary: &TargetSummary,
) -> Result<DMatrix<f64>> {
    Ok(parts(fit, data, model, basis, summary)?.w)
}

pub fn specification_test(
    fit: &FlexFit,
    data: &SourceDataset,
    model: &ShiftModel,
    basis: &BasisSpec,
    summary: &TargetSummary,
) -> Result<ModelCheckResult> {
    let p = parts(fit, data, model, basis, summary)?;
    let df = (basis.k() + 1).saturating_sub(model.d_alpha());
    let w_inv = floored_spd_inverse(&p.w, EIGEN_FLOOR).ok_or(Error::DegenerateTestWeighting)?;
    let t = (data.n() as f64 * (p.h_mean.transpose() * w_inv * &p.h_mean)[0]).max(0.0);
    Ok(ModelCheckResult {
        t,
        df,
        p_value: if df == 0 { 1.0 } else { chi2_sf(t, df) },
    })
}
