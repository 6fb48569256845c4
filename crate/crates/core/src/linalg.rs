//! Small dense least-squares helpers shared by the fitting routines.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Ordinary least-squares solution of `design * x ≈ y`.
pub(crate) struct LeastSquares {
    pub coef: DVector<f64>,
    /// `(XᵀX)⁻¹` in the original (unscaled) parameterisation.
    pub cov_unscaled: DMatrix<f64>,
    pub rss: f64,
    pub dof: usize,
}

impl LeastSquares {
    /// Residual variance estimate `rss / dof`.
    pub fn sigma2(&self) -> f64 {
        if self.dof == 0 {
            0.0
        } else {
            self.rss / self.dof as f64
        }
    }
}

/// Solves a (optionally weighted) linear least-squares problem through an SVD
/// of the column-equilibrated design matrix.
pub(crate) fn lstsq(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: Option<&[f64]>,
) -> Result<LeastSquares> {
    let (n, k) = design.shape();
    if n < k {
        return Err(Error::InsufficientData(format!(
            "{n} observations for {k} parameters"
        )));
    }
    let mut a = design.clone();
    let mut b = y.clone();
    if let Some(w) = weights {
        for (i, &wi) in w.iter().enumerate() {
            let s = wi.sqrt();
            a.row_mut(i).scale_mut(s);
            b[i] *= s;
        }
    }
    let scale: Vec<f64> = (0..k)
        .map(|j| {
            let norm = a.column(j).norm();
            if norm > 0.0 {
                norm
            } else {
                1.0
            }
        })
        .collect();
    for (j, s) in scale.iter().enumerate() {
        a.column_mut(j).unscale_mut(*s);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-13 * n.max(k) as f64;
    if svd.singular_values.iter().any(|&s| s <= tol) {
        return Err(Error::Singular("design matrix is rank deficient".into()));
    }
    let coef_scaled = svd
        .solve(&b, tol)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let resid = &a * &coef_scaled - &b;
    let rss = resid.norm_squared();

    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut cov = DMatrix::zeros(k, k);
    for (idx, s) in svd.singular_values.iter().enumerate() {
        let v = v_t.row(idx).transpose();
        cov += (&v * v.transpose()) / (s * s);
    }
    let mut coef = coef_scaled;
    for j in 0..k {
        coef[j] /= scale[j];
        for l in 0..k {
            cov[(j, l)] /= scale[j] * scale[l];
        }
    }
    Ok(LeastSquares {
        coef,
        cov_unscaled: cov,
        rss,
        dof: n - k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let design = DMatrix::from_fn(4, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let y = DVector::from_iterator(4, xs.iter().map(|x| 2.0 - 0.5 * x));
        let fit = lstsq(&design, &y, None).unwrap();
        assert!((fit.coef[0] - 2.0).abs() < 1e-12);
        assert!((fit.coef[1] + 0.5).abs() < 1e-12);
        assert!(fit.rss < 1e-24);
    }

    #[test]
    fn rank_deficient_is_rejected() {
        let design = DMatrix::from_fn(4, 2, |i, _| i as f64);
        let y = DVector::from_element(4, 1.0);
        assert!(lstsq(&design, &y, None).is_err());
    }
}
