//! Dense symmetric-matrix kernels.
//!
//! Everything here works through a symmetric eigendecomposition: the
//! matrices that show up in scrubbing (Hessians, Fisher matrices, noise
//! covariances) are small, dense and symmetric, so spectral calculus is both
//! simple and as accurate as the eigensolver.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default floor applied to eigenvalues before any inverse power.
pub const DEFAULT_EIG_FLOOR: f64 = 1e-8;

/// Largest `lambda * t` accepted by [`mat_exp`].
const EXP_LIMIT: f64 = 700.0;

/// Mixed diagonal/full KL pairs are promoted to full up to this dimension.
const MAX_PROMOTE_DIM: usize = 512;

const EIG_EPS: f64 = 1e-15;
const EIG_MAX_ITER: usize = 10_000;

/// A dense symmetric matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Validates squareness, finiteness and symmetry
    /// (`|m_ij - m_ji| <= 1e-12 * max(1, |m_ij|)`).
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let n = m.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let gap = (m[(i, j)] - m[(j, i)]).abs();
                if gap > 1e-12 * m[(i, j)].abs().max(1.0) {
                    return Err(Error::NotSymmetric { row: i, col: j, gap });
                }
            }
        }
        Ok(SymMatrix(m))
    }

    /// Builds from a matrix that is symmetric up to rounding by averaging it
    /// with its transpose. Non-finite input is still rejected.
    pub fn symmetrize(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let t = m.transpose();
        Ok(SymMatrix((m + t) * 0.5))
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        SymMatrix::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn diagonal(&self) -> DVector<f64> {
        self.0.diagonal()
    }

    /// `self + other`, both symmetric.
    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        check_dim(self.dim(), other.dim())?;
        Ok(SymMatrix(&self.0 + &other.0))
    }

    /// `self - other`, both symmetric.
    pub fn sub(&self, other: &SymMatrix) -> Result<SymMatrix> {
        check_dim(self.dim(), other.dim())?;
        Ok(SymMatrix(&self.0 - &other.0))
    }

    pub fn scale(&self, k: f64) -> SymMatrix {
        SymMatrix(&self.0 * k)
    }

    /// Adds `k` to every diagonal entry.
    pub fn shift(&self, k: f64) -> SymMatrix {
        let mut m = self.0.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += k;
        }
        SymMatrix(m)
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), v.len())?;
        Ok(&self.0 * v)
    }
}

/// Eigenvalues in ascending order with matching orthonormal eigenvectors as
/// columns.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenPair {
    /// Rebuilds `V * diag(f(lambda)) * V^T`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<SymMatrix> {
        let mapped = self.values.map(f);
        let scaled = &self.vectors * DMatrix::from_diagonal(&mapped);
        SymMatrix::symmetrize(scaled * self.vectors.transpose())
    }

    pub fn reconstruct(&self) -> Result<SymMatrix> {
        self.map(|v| v)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Symmetric eigendecomposition, eigenvalues ascending.
pub fn sym_eig(m: &SymMatrix) -> Result<EigenPair> {
    if m.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let dim = m.dim();
    if dim == 0 {
        return Ok(EigenPair {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let eig = SymmetricEigen::try_new(m.0.clone(), EIG_EPS, EIG_MAX_ITER).ok_or(Error::ConvergenceFailure { max_iter: EIG_MAX_ITER })?;
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(dim, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(dim, dim);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(EigenPair { values, vectors })
}

/// `exp(M t)` through the eigendecomposition of `M`.
pub fn mat_exp(m: &SymMatrix, t: f64) -> Result<SymMatrix> {
    let eig = sym_eig(m)?;
    mat_exp_from(&eig, t)
}

/// [`mat_exp`] reusing an existing decomposition.
pub fn mat_exp_from(eig: &EigenPair, t: f64) -> Result<SymMatrix> {
    if let Some(worst) = eig.values.iter().map(|v| v * t).filter(|e| *e > EXP_LIMIT).reduce(f64::max) {
        return Err(Error::Overflow { exponent: worst });
    }
    eig.map(|v| (v * t).exp())
}

/// Caps every eigenvalue of `M` at `cap`. Matrices already within the cap are
/// returned unchanged.
pub fn clamp_eigs(m: &SymMatrix, cap: f64) -> Result<SymMatrix> {
    let eig = sym_eig(m)?;
    if eig.values.iter().all(|&v| v <= cap) {
        return Ok(m.clone());
    }
    eig.map(|v| v.min(cap))
}

/// The inverse powers used by the scrubbing formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvPower {
    /// `M^-1`
    Inverse,
    /// `M^-1/2`
    InvSqrt,
    /// `M^-1/4`
    InvFourthRoot,
}

impl InvPower {
    pub fn exponent(self) -> f64 {
        match self {
            InvPower::Inverse => -1.0,
            InvPower::InvSqrt => -0.5,
            InvPower::InvFourthRoot => -0.25,
        }
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            InvPower::Inverse => 1.0 / v,
            InvPower::InvSqrt => 1.0 / v.sqrt(),
            InvPower::InvFourthRoot => 1.0 / v.sqrt().sqrt(),
        }
    }
}

/// Floors the eigenvalues at `floor`, then raises them to `power`.
pub fn inv_frac_power(m: &SymMatrix, power: InvPower, floor: f64) -> Result<SymMatrix> {
    let eig = sym_eig(m)?;
    inv_frac_power_from(&eig, power, floor)
}

pub fn inv_frac_power_from(eig: &EigenPair, power: InvPower, floor: f64) -> Result<SymMatrix> {
    check_floor(floor)?;
    eig.map(|v| power.apply(v.max(floor)))
}

pub(crate) fn check_floor(floor: f64) -> Result<()> {
    // NaN fails the comparison too
    if floor > 0.0 && floor.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidFloor(floor))
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// Covariance of a Gaussian: diagonal variances or a full matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Diagonal(DVector<f64>),
    Full(SymMatrix),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(d) => d.len(),
            Covariance::Full(m) => m.dim(),
        }
    }

    pub fn to_full(&self) -> SymMatrix {
        match self {
            Covariance::Diagonal(d) => SymMatrix(DMatrix::from_diagonal(d)),
            Covariance::Full(m) => m.clone(),
        }
    }

    /// Rejects non-positive variances or a full matrix that is not PD.
    pub fn validate(&self) -> Result<()> {
        match self {
            Covariance::Diagonal(d) => {
                if d.iter().all(|v| *v > 0.0 && v.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::SingularCovariance)
                }
            }
            Covariance::Full(m) => {
                if sym_eig(m)?.min_value() > 0.0 {
                    Ok(())
                } else {
                    Err(Error::SingularCovariance)
                }
            }
        }
    }

    /// A matrix `L` with `L L^T = Sigma`, used to draw correlated noise.
    pub fn sqrt_factor(&self) -> Result<DMatrix<f64>> {
        match self {
            Covariance::Diagonal(d) => Ok(DMatrix::from_diagonal(&d.map(f64::sqrt))),
            Covariance::Full(m) => Ok(sym_eig(m)?.map(|v| v.max(0.0).sqrt())?.into_matrix()),
        }
    }

    /// Maps `z ~ N(0, I)` to `Sigma^{1/2} z`.
    pub fn color(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), z.len())?;
        match self {
            Covariance::Diagonal(d) => Ok(z.zip_map(d, |zi, v| zi * v.sqrt())),
            Covariance::Full(_) => Ok(self.sqrt_factor()? * z),
        }
    }

    /// `tr(B Sigma)`.
    pub fn trace_product(&self, b: &SymMatrix) -> Result<f64> {
        check_dim(self.dim(), b.dim())?;
        Ok(match self {
            Covariance::Diagonal(d) => d.iter().enumerate().map(|(i, v)| b.0[(i, i)] * v).sum(),
            Covariance::Full(m) => (b.as_matrix() * m.as_matrix()).trace(),
        })
    }
}

/// A multivariate Gaussian `N(mean, covariance)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub covariance: Covariance,
}

impl GaussianParams {
    pub fn new(mean: DVector<f64>, covariance: Covariance) -> Result<Self> {
        check_dim(mean.len(), covariance.dim())?;
        Ok(GaussianParams { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `KL(p || q)` in nats:
/// `0.5 * (tr(Sq^-1 Sp) + (mq - mp)^T Sq^-1 (mq - mp) - k + ln(|Sq| / |Sp|))`.
pub fn gaussian_kl(p: &GaussianParams, q: &GaussianParams) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    check_dim(p.dim(), p.covariance.dim())?;
    check_dim(q.dim(), q.covariance.dim())?;
    p.covariance.validate()?;
    q.covariance.validate()?;
    if p == q {
        return Ok(0.0);
    }
    let k = p.dim() as f64;
    let diff = &q.mean - &p.mean;
    let kl = match (&p.covariance, &q.covariance) {
        (Covariance::Diagonal(sp), Covariance::Diagonal(sq)) => {
            let mut acc = 0.0;
            for i in 0..sp.len() {
                let ratio = sp[i] / sq[i];
                acc += ratio + diff[i] * diff[i] / sq[i] - 1.0 - ratio.ln();
            }
            0.5 * acc
        }
        (cp, cq) => {
            let mixed = matches!(
                (cp, cq),
                (Covariance::Diagonal(_), Covariance::Full(_)) | (Covariance::Full(_), Covariance::Diagonal(_))
            );
            if mixed && p.dim() > MAX_PROMOTE_DIM {
                return Err(Error::CovarianceTooLarge(p.dim()));
            }
            let sp = cp.to_full();
            let sq = cq.to_full();
            let chol_q = sq.0.clone().cholesky().ok_or(Error::SingularCovariance)?;
            let chol_p = sp.0.clone().cholesky().ok_or(Error::SingularCovariance)?;
            let trace = chol_q.solve(&sp.0).trace();
            let maha = diff.dot(&chol_q.solve(&diff));
            let logdet_q = 2.0 * chol_q.l().diagonal().map(f64::ln).sum();
            let logdet_p = 2.0 * chol_p.l().diagonal().map(f64::ln).sum();
            0.5 * (trace + maha - k + logdet_q - logdet_p)
        }
    };
    if !kl.is_finite() {
        return Err(Error::SingularCovariance);
    }
    // rounding can leave a tiny negative value for near-identical inputs
    Ok(kl.max(0.0))
}
