//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SurrogacyError};

/// Reassembles a symmetric matrix with eigenvalues clipped from below.
pub fn clip_eigenvalues(eig: &SymmetricEigen<f64, Dyn>, floor: f64) -> DMatrix<f64> {
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    let m = v * DMatrix::from_diagonal(&vals) * v.transpose();
    (&m + m.transpose()) * 0.5
}

/// Cholesky factorisation that adds diagonal jitter to matrices that are
/// positive semi-definite but numerically singular.
pub fn robust_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let scale = (m.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = scale * 1e-12;
    for _ in 0..12 {
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(SurrogacyError::Numerical(format!(
        "matrix of dimension {n} is not positive definite"
    )))
}

/// Draws from N(Q⁻¹ b, Q⁻¹) given the precision `q` and linear term `b`.
pub fn sample_from_precision<R: Rng + ?Sized>(
    q: DMatrix<f64>,
    b: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let chol = robust_cholesky(&q)?;
    let mean = chol.solve(b);
    let z = DVector::from_fn(b.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    // L Lᵀ = Q, so Lᵀ x = z gives Cov(x) = Q⁻¹.
    let l = chol.l();
    let x = l
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| SurrogacyError::Numerical("singular Cholesky factor".into()))?;
    Ok(mean + x)
}

/// Log density of N(0, cov) at `resid`.
pub fn mvn_log_density(resid: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let n = resid.len();
    let mut log_det_half = 0.0;
    for i in 0..n {
        log_det_half += l[(i, i)].ln();
    }
    let mut w = resid.clone();
    // forward substitution on the lower factor only
    for i in 0..n {
        let mut s = w[i];
        for k in 0..i {
            s -= l[(i, k)] * w[k];
        }
        w[i] = s / l[(i, i)];
    }
    -0.5 * w.norm_squared() - log_det_half - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Symmetric square root factor `A` with `A Aᵀ = cov`, valid for singular
/// PSD matrices.
pub fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn precision_sampler_moments() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let q = cov.clone().try_inverse().unwrap();
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let b = &q * &mean;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40_000;
        let draws: Vec<DVector<f64>> = (0..n)
            .map(|_| sample_from_precision(q.clone(), &b, &mut rng).unwrap())
            .collect();
        let m0 = draws.iter().map(|d| d[0]).sum::<f64>() / n as f64;
        let m1 = draws.iter().map(|d| d[1]).sum::<f64>() / n as f64;
        let c01 = draws.iter().map(|d| (d[0] - m0) * (d[1] - m1)).sum::<f64>() / n as f64;
        let v0 = draws.iter().map(|d| (d[0] - m0).powi(2)).sum::<f64>() / n as f64;
        assert_abs_diff_eq!(m0, 1.0, epsilon = 0.03);
        assert_abs_diff_eq!(m1, -2.0, epsilon = 0.03);
        assert_abs_diff_eq!(c01, 0.6, epsilon = 0.04);
        assert_abs_diff_eq!(v0, 2.0, epsilon = 0.06);
    }

    #[test]
    fn mvn_density_matches_univariate() {
        let cov = DMatrix::from_element(1, 1, 4.0);
        let chol = Cholesky::new(cov).unwrap();
        let r = DVector::from_element(1, 1.0);
        let expected = -0.5 * 0.25 - 2f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_abs_diff_eq!(mvn_log_density(&r, &chol), expected, epsilon = 1e-14);
    }

    #[test]
    fn robust_cholesky_handles_singular_psd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(robust_cholesky(&m).is_ok());
        let f = psd_factor(&m);
        let back = &f * f.transpose();
        assert_abs_diff_eq!(back[(0, 1)], 1.0, epsilon = 1e-12);
    }
}
