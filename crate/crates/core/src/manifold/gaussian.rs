//! Gaussian statistics on a product manifold: densities in tangent space at
//! the mean, precision-weighted fusion, and weighted Karcher means.

use super::{ManifoldPoint, ManifoldSpec};
use crate::config::{COV_FLOOR, FIXED_POINT_MAX_ITER, FIXED_POINT_TOL};
use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// A normal distribution on the manifold: mean point plus a covariance
/// expressed in the tangent space at the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiemannianGaussian {
    pub mean: ManifoldPoint,
    #[serde(with = "square_matrix")]
    pub covariance: DMatrix<f64>,
}

/// Square matrices serialize as flat row-major arrays; the side length is
/// recovered from the element count.
pub mod square_matrix {
    use nalgebra::DMatrix;
    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<f64> = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
            .collect();
        serde::Serialize::serialize(&rows, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let data = Vec::<f64>::deserialize(d)?;
        let n = (data.len() as f64).sqrt().round() as usize;
        if n * n != data.len() {
            return Err(D::Error::custom(format!(
                "flat matrix of length {} is not square",
                data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(n, n, &data))
    }
}

impl RiemannianGaussian {
    pub fn new(mean: ManifoldPoint, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.spec.tangent_dim();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::invalid_input(format!(
                "covariance is {}x{}, tangent dimension is {}",
                covariance.nrows(),
                covariance.ncols(),
                d
            )));
        }
        let asym = (&covariance - covariance.transpose()).abs().max();
        if asym > 1e-9 {
            return Err(Error::invalid_input(format!(
                "covariance asymmetry {asym:.3e}"
            )));
        }
        // exact symmetry keeps downstream eigen/Cholesky stable
        let covariance = 0.5 * (&covariance + covariance.transpose());
        Ok(RiemannianGaussian { mean, covariance })
    }

    /// Isotropic Gaussian, mostly for tests and floor-covariance fallbacks.
    pub fn isotropic(mean: ManifoldPoint, variance: f64) -> Self {
        let d = mean.spec.tangent_dim();
        RiemannianGaussian {
            mean,
            covariance: DMatrix::identity(d, d) * variance,
        }
    }

    pub fn spec(&self) -> &ManifoldSpec {
        &self.mean.spec
    }

    pub fn dim(&self) -> usize {
        self.mean.spec.tangent_dim()
    }

    /// Add `COV_FLOOR` to the diagonal while any eigenvalue sits below the
    /// floor. Keeps products of low-variance components invertible.
    pub fn regularized(mut self) -> Self {
        self.covariance = regularize_covariance(self.covariance);
        self
    }

    fn cholesky(&self) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        Cholesky::new(self.covariance.clone()).ok_or_else(|| {
            Error::NotPositiveDefinite(format!(
                "covariance of Gaussian at dim {} failed Cholesky",
                self.dim()
            ))
        })
    }

    /// Log-density `−½ Logᵀ Σ⁻¹ Log − ½ log((2π)^d |Σ|)` with the residual
    /// taken in the tangent space at the mean.
    pub fn log_pdf(&self, x: &ManifoldPoint) -> Result<f64> {
        let chol = self.cholesky()?;
        let v = self.mean.spec.log(&self.mean, x);
        let d = self.dim() as f64;
        let log_det = 2.0 * chol.l().diagonal().map(f64::ln).sum();
        let maha = v.dot(&chol.solve(&v));
        Ok(-0.5 * (maha + d * (2.0 * std::f64::consts::PI).ln() + log_det))
    }

    /// Squared Mahalanobis distance of `x` under this Gaussian.
    pub fn mahalanobis_sq(&self, x: &ManifoldPoint) -> Result<f64> {
        let chol = self.cholesky()?;
        let v = self.mean.spec.log(&self.mean, x);
        Ok(v.dot(&chol.solve(&v)))
    }
}

/// Diagonal-loading regularization used everywhere a covariance is fitted
/// from data.
pub fn regularize_covariance(mut cov: DMatrix<f64>) -> DMatrix<f64> {
    cov = 0.5 * (&cov + cov.transpose());
    let n = cov.nrows();
    for _ in 0..16 {
        let min_eig = cov
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig >= COV_FLOOR {
            break;
        }
        for i in 0..n {
            cov[(i, i)] += COV_FLOOR;
        }
    }
    cov
}

/// Precision-weighted product of Gaussians, all expressed on the same
/// manifold.
///
/// Euclidean manifolds use the closed form directly. Manifolds with
/// quaternion blocks run a fixed point: transport every component into the
/// tangent space at the current estimate, fuse there, step by Exp, repeat
/// until the step norm drops below `1e-9`.
pub fn gaussian_product(gaussians: &[RiemannianGaussian]) -> Result<RiemannianGaussian> {
    if gaussians.is_empty() {
        return Err(Error::invalid_input("gaussian_product of empty list"));
    }
    let spec = gaussians[0].spec().clone();
    for g in gaussians {
        if g.spec() != &spec {
            return Err(Error::invalid_input(
                "gaussian_product arguments on different manifolds",
            ));
        }
    }
    if gaussians.len() == 1 {
        return Ok(gaussians[0].clone());
    }

    if spec.is_euclidean() {
        return euclidean_product(&spec, gaussians);
    }

    let precisions: Vec<DMatrix<f64>> = gaussians
        .iter()
        .map(|g| invert_spd(&g.covariance))
        .collect::<Result<_>>()?;

    let mut mean = gaussians[0].mean.clone();
    let d = spec.tangent_dim();
    let mut residual = f64::INFINITY;
    for _ in 0..FIXED_POINT_MAX_ITER {
        let mut precision_sum = DMatrix::zeros(d, d);
        let mut weighted = DVector::zeros(d);
        for (g, prec) in gaussians.iter().zip(&precisions) {
            let t = spec.transport_matrix(&g.mean, &mean);
            let prec_here = &t * prec * t.transpose();
            let m = spec.log(&mean, &g.mean);
            weighted += &prec_here * m;
            precision_sum += prec_here;
        }
        let fused_cov = invert_spd(&precision_sum)?;
        let step = &fused_cov * weighted;
        mean = spec.exp(&mean, &step);
        residual = step.norm();
        if residual < FIXED_POINT_TOL {
            // covariance re-expressed at the final mean
            let mut precision_sum = DMatrix::zeros(d, d);
            for (g, prec) in gaussians.iter().zip(&precisions) {
                let t = spec.transport_matrix(&g.mean, &mean);
                precision_sum += &t * prec * t.transpose();
            }
            let covariance = invert_spd(&precision_sum)?;
            return RiemannianGaussian::new(mean, covariance);
        }
    }
    Err(Error::NoConvergence {
        context: format!(
            "gaussian_product fixed point (last iterate {:?})",
            mean.coords
        ),
        iterations: FIXED_POINT_MAX_ITER,
        residual,
    })
}

fn euclidean_product(
    spec: &ManifoldSpec,
    gaussians: &[RiemannianGaussian],
) -> Result<RiemannianGaussian> {
    let d = spec.tangent_dim();
    let mut precision_sum = DMatrix::zeros(d, d);
    let mut weighted = DVector::zeros(d);
    for g in gaussians {
        let prec = invert_spd(&g.covariance)?;
        weighted += &prec * DVector::from_column_slice(&g.mean.coords);
        precision_sum += prec;
    }
    let covariance = invert_spd(&precision_sum)?;
    let mean = spec.point((&covariance * weighted).as_slice().to_vec())?;
    RiemannianGaussian::new(mean, covariance)
}

pub(crate) fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(m.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{}x{} matrix", m.nrows(), m.ncols())))
}

/// Weighted Karcher mean: fixed point of
/// `μ ← Exp_μ( Σ wᵢ Log_μ(xᵢ) / Σ wᵢ )`.
pub fn weighted_karcher_mean(points: &[ManifoldPoint], weights: &[f64]) -> Result<ManifoldPoint> {
    if points.is_empty() || points.len() != weights.len() {
        return Err(Error::invalid_input(
            "karcher mean needs equal nonzero numbers of points and weights",
        ));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::invalid_input("karcher mean weights must be ≥ 0"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid_input("karcher mean weights sum to zero"));
    }
    let spec = points[0].spec.clone();

    if spec.is_euclidean() {
        let d = spec.ambient_dim();
        let mut acc = DVector::zeros(d);
        for (p, w) in points.iter().zip(weights) {
            acc += DVector::from_column_slice(&p.coords) * (*w / total);
        }
        return spec.point(acc.as_slice().to_vec());
    }

    let mut mean = points[0].clone();
    let mut residual = f64::INFINITY;
    for _ in 0..FIXED_POINT_MAX_ITER {
        let mut step = DVector::zeros(spec.tangent_dim());
        for (p, w) in points.iter().zip(weights) {
            step += spec.log(&mean, p) * (*w / total);
        }
        residual = step.norm();
        mean = spec.exp(&mean, &step);
        if residual < FIXED_POINT_TOL {
            return Ok(mean);
        }
    }
    Err(Error::NoConvergence {
        context: format!("karcher mean (last iterate {:?})", mean.coords),
        iterations: FIXED_POINT_MAX_ITER,
        residual,
    })
}
