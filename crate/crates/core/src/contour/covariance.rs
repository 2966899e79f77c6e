use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues at or below this are treated as null directions.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Shrunk sample covariance `(1 - lambda) S + lambda diag(S)` and its
/// eigen-decomposition pseudo-inverse.
#[derive(Clone, Debug)]
pub struct CovarianceModel {
    pub lambda: f64,
    pub sigma: DMatrix<f64>,
    pub pinv: DMatrix<f64>,
}

impl CovarianceModel {
    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// Identity covariance of dimension `d`.
    pub fn identity(d: usize) -> Self {
        CovarianceModel {
            lambda: 0.0,
            sigma: DMatrix::identity(d, d),
            pinv: DMatrix::identity(d, d),
        }
    }

    pub fn from_sigma(sigma: DMatrix<f64>, lambda: f64) -> Result<Self> {
        if !sigma.is_square() {
            return Err(Error::InvalidArgument("covariance must be square".into()));
        }
        let eig = SymmetricEigen::new(sigma.clone());
        let inv = eig.eigenvalues.map(|l| if l > EIGEN_FLOOR { 1.0 / l } else { 0.0 });
        let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
        Ok(CovarianceModel { lambda, sigma, pinv })
    }
}

pub fn fit_covariance(vectors: &[Vec<f64>], lambda: f64) -> Result<CovarianceModel> {
    if vectors.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "covariance needs at least 2 vectors, got {}",
            vectors.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("shrinkage must lie in [0, 1], got {lambda}")));
    }
    let d = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != d) {
        return Err(Error::ShapeMismatch {
            op: "fit_covariance",
            lhs: vec![d],
            rhs: vec![v.len()],
        });
    }
    let n = vectors.len();
    let data = DMatrix::from_fn(n, d, |i, j| vectors[i][j]);
    let mean = data.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| data[(i, j)] - mean[j]);
    let s = centered.transpose() * &centered / (n as f64 - 1.0);
    let diag = DMatrix::from_diagonal(&s.diagonal());
    let sigma = s * (1.0 - lambda) + diag * lambda;
    CovarianceModel::from_sigma(sigma, lambda)
}

/// `sqrt((e - f)^T Sigma^+ (e - f))`.
pub fn mahalanobis(e: &[f64], f: &[f64], cov: &CovarianceModel) -> Result<f64> {
    if e.len() != f.len() || e.len() != cov.dim() {
        return Err(Error::ShapeMismatch {
            op: "mahalanobis",
            lhs: vec![e.len(), f.len()],
            rhs: vec![cov.dim()],
        });
    }
    let diff = DVector::from_iterator(e.len(), e.iter().zip(f).map(|(a, b)| a - b));
    Ok(diff.dot(&(&cov.pinv * &diff)).max(0.0).sqrt())
}

pub fn euclidean(e: &[f64], f: &[f64]) -> f64 {
    e.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}
