use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{ArrayView2, Axis};

use crate::error::{Error, Result};

fn moments(x: ArrayView2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let mu = DVector::from_iterator(d, mean.iter().copied());
    let mut centered = DMatrix::zeros(n, d);
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        for j in 0..d {
            centered[(i, j)] = row[j] - mean[j];
        }
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets (rows are
/// samples). The trace of `(Σa Σb)^{1/2}` is taken as the trace of the
/// symmetric root of `Σa^{1/2} Σb Σa^{1/2}`.
pub fn fid(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::invalid("each feature set needs at least two vectors"));
    }
    if a.ncols() != b.ncols() || a.ncols() == 0 {
        return Err(Error::invalid(format!(
            "feature dimensions differ or are empty: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("features contain non-finite values"));
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let root_a = psd_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let cross = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum::<f64>();
    let dist = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}

pub fn fid_f32(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<f64> {
    fid(a.mapv(f64::from).view(), b.mapv(f64::from).view())
}
