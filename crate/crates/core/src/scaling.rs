use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Column centering and scaling by the source mean and SD.
#[derive(Debug, Clone)]
pub(crate) struct ColumnScaling {
    pub center: DVector<f64>,
    pub scale: DVector<f64>,
}

impl ColumnScaling {
    pub fn fit(m: &DMatrix<f64>, labels: &[String]) -> Result<Self> {
        let n = m.nrows() as f64;
        let k = m.ncols();
        let mut center = DVector::zeros(k);
        let mut scale = DVector::zeros(k);
        for j in 0..k {
            let col = m.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            if !(sd > 1e-300) || !sd.is_finite() || sd <= 1e-12 * mean.abs() {
                return Err(Error::IllConditioned(format!(
                    "column `{}` is constant in the source sample",
                    labels.get(j).map(String::as_str).unwrap_or("?")
                )));
            }
            center[j] = mean;
            scale[j] = sd;
        }
        Ok(Self { center, scale })
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
            (m[(i, j)] - self.center[j]) / self.scale[j]
        })
    }

    pub fn apply_point(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |j, _| (v[j] - self.center[j]) / self.scale[j])
    }

    pub fn invert_point(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |j, _| v[j] * self.scale[j] + self.center[j])
    }

    /// Map a matrix acting on original-scale differences to standardized ones:
    /// `S⁻¹ A S⁻¹`.
    pub fn standardize_form(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| {
            a[(i, j)] / (self.scale[i] * self.scale[j])
        })
    }
}
