//! Gaussian components and mixtures.
//!
//! A component is `(a, x_m, Σ_m)` where `Σ_m` is the symmetric positive
//! definite *square root* of the covariance matrix; the covariance is `Σ_m²`.
//! A mixture is a plain weighted sum of normalized densities and is not
//! required to have unit total weight.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::linalg;

const SYMMETRY_RTOL: f64 = 1e-12;

/// One weighted anisotropic Gaussian: weight, mean and covariance square root.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    weight: f64,
    mean: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl GaussianComponent {
    /// Build a component from weight, mean and covariance square root `Σ`.
    pub fn new(weight: f64, mean: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return invalid("component dimension must be at least 1");
        }
        if sigma.nrows() != n || sigma.ncols() != n {
            return invalid("sigma shape does not match the mean dimension");
        }
        if !weight.is_finite() || weight < 0.0 {
            return invalid("component weight must be finite and non-negative");
        }
        if mean.iter().any(|v| !v.is_finite()) || sigma.iter().any(|v| !v.is_finite()) {
            return invalid("component parameters must be finite");
        }
        if linalg::asymmetry(&sigma) > SYMMETRY_RTOL {
            return invalid("sigma must be symmetric");
        }
        let (lo, hi) = linalg::eigen_range(&sigma);
        if lo.is_nan() || lo <= 0.0 {
            return invalid("sigma must be positive definite");
        }
        // Effectively singular or astronomically scaled roots break the
        // covariance factorization; reject them up front.
        if lo <= hi * 1e-7 || lo < 1e-100 || hi > 1e100 {
            return invalid("sigma is too ill-conditioned to evaluate");
        }
        Ok(GaussianComponent {
            weight,
            mean,
            sigma,
        })
    }

    /// Build a component from weight, mean and full covariance `Σ²`; the
    /// stored square root is the symmetric PSD root of the covariance.
    pub fn from_covariance(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if linalg::asymmetry(&cov) > SYMMETRY_RTOL {
            return invalid("covariance must be symmetric");
        }
        let (lo, _) = linalg::eigen_range(&cov);
        if lo.is_nan() || lo <= 0.0 {
            return invalid("covariance must be positive definite");
        }
        let sigma = linalg::spd_sqrt_floored(&cov, 0.0);
        GaussianComponent::new(weight, mean, sigma)
    }

    /// Spherical component with `Σ = σ·I`.
    pub fn spherical(weight: f64, mean: &[f64], sigma: f64) -> Result<Self> {
        if sigma.is_nan() || sigma <= 0.0 {
            return invalid("spherical sigma must be positive");
        }
        let n = mean.len();
        GaussianComponent::new(
            weight,
            DVector::from_column_slice(mean),
            DMatrix::identity(n, n) * sigma,
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Covariance square root `Σ`.
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Full covariance `Σ²`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.sigma * &self.sigma
    }

    pub fn with_weight(&self, weight: f64) -> Result<Self> {
        GaussianComponent::new(weight, self.mean.clone(), self.sigma.clone())
    }
}

/// Ordered list of Gaussian components; may be empty (the zero function).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gmm {
    components: Vec<GaussianComponent>,
}

impl Gmm {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Gmm> {
        if let Some(first) = components.first() {
            let n = first.dim();
            if components.iter().any(|c| c.dim() != n) {
                return invalid("all components must share one dimension");
            }
        }
        Ok(Gmm { components })
    }

    pub fn empty() -> Gmm {
        Gmm {
            components: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Dimension, or `None` for the empty mixture.
    pub fn dim(&self) -> Option<usize> {
        self.components.first().map(|c| c.dim())
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn iter(&self) -> std::slice::Iter<'_, GaussianComponent> {
        self.components.iter()
    }

    pub fn total_weight(&self) -> f64 {
        self.components.iter().map(|c| c.weight()).sum()
    }

    /// Mixture with weights scaled to sum to one; means and Σ unchanged.
    pub fn normalized(&self) -> Result<Gmm> {
        let total = self.total_weight();
        if total.is_nan() || total <= 0.0 {
            return invalid("cannot normalize a mixture with non-positive total weight");
        }
        let components = self
            .components
            .iter()
            .map(|c| c.with_weight(c.weight() / total))
            .collect::<Result<Vec<_>>>()?;
        Gmm::new(components)
    }

    /// Concatenation of two mixtures.
    pub fn concat(&self, other: &Gmm) -> Result<Gmm> {
        let mut components = self.components.clone();
        components.extend(other.components.iter().cloned());
        Gmm::new(components)
    }
}

impl From<GaussianComponent> for Gmm {
    fn from(c: GaussianComponent) -> Gmm {
        Gmm {
            components: vec![c],
        }
    }
}
