//! Mixture evaluation: densities, rasterization, analytic derivatives,
//! discrete norms and SNR metrics.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::grid::{Grid, Signal};
use crate::mixture::{GaussianComponent, Gmm};

/// One component with its factorizations cached for repeated evaluation.
///
/// `chol_l` is the lower Cholesky factor of the covariance `Σ²`, so a
/// density evaluation is one triangular solve; `Σ⁻²` is kept for gradient
/// and Hessian work.
#[derive(Debug, Clone)]
pub(crate) struct PreparedGaussian {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub chol_l: DMatrix<f64>,
    pub inv_cov: DMatrix<f64>,
    /// `(2π)^{-n/2} / det Σ`
    pub c_norm: f64,
}

impl PreparedGaussian {
    pub fn from_component(c: &GaussianComponent) -> PreparedGaussian {
        let cov = c.covariance();
        let chol = nalgebra::Cholesky::new(cov)
            .expect("component sigma is validated SPD, covariance must factor");
        let inv_cov = chol.inverse();
        let l = chol.unpack();
        PreparedGaussian::from_weight_mean_chol(c.weight(), c.mean().as_slice(), l, inv_cov)
    }

    /// Build from a lower Cholesky factor of the covariance directly.
    pub fn from_weight_mean_chol(
        weight: f64,
        mean: &[f64],
        chol_l: DMatrix<f64>,
        inv_cov: DMatrix<f64>,
    ) -> PreparedGaussian {
        let n = mean.len();
        let det_sigma: f64 = (0..n).map(|i| chol_l[(i, i)]).product();
        let c_norm = (2.0 * PI).powf(-(n as f64) / 2.0) / det_sigma;
        PreparedGaussian {
            weight,
            mean: mean.to_vec(),
            chol_l,
            inv_cov,
            c_norm,
        }
    }

    /// Forward-substitute `L w = x - mean` into `scratch`, returning the
    /// squared Mahalanobis distance `|w|²`.
    #[inline]
    pub fn mahalanobis_sq(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let n = self.mean.len();
        let l = &self.chol_l;
        let mut q = 0.0;
        for i in 0..n {
            let mut acc = x[i] - self.mean[i];
            for j in 0..i {
                acc -= l[(i, j)] * scratch[j];
            }
            let w = acc / l[(i, i)];
            scratch[i] = w;
            q += w * w;
        }
        q
    }

    /// `a · C_Σ · exp(-q/2)` at `x`.
    #[inline]
    pub fn weighted_density(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let q = self.mahalanobis_sq(x, scratch);
        self.weight * self.c_norm * (-0.5 * q).exp()
    }
}

/// All components of a mixture prepared for repeated evaluation.
#[derive(Debug, Clone)]
pub(crate) struct PreparedMixture {
    pub components: Vec<PreparedGaussian>,
    dim: usize,
}

impl PreparedMixture {
    pub fn new(gmm: &Gmm, dim_hint: usize) -> PreparedMixture {
        let dim = gmm.dim().unwrap_or(dim_hint);
        PreparedMixture {
            components: gmm.iter().map(PreparedGaussian::from_component).collect(),
            dim,
        }
    }

    pub fn value(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        self.components
            .iter()
            .map(|c| c.weighted_density(x, scratch))
            .sum()
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut grad = DVector::zeros(self.dim);
        let mut scratch = vec![0.0; self.dim];
        for c in &self.components {
            let v = c.weighted_density(x.as_slice(), &mut scratch);
            // v · Σ⁻²(x_m - x)
            let mut z = DVector::from_column_slice(&c.mean);
            z -= x;
            grad.gemv(v, &c.inv_cov, &z, 1.0);
        }
        grad
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim;
        let mut hess = DMatrix::zeros(n, n);
        let mut scratch = vec![0.0; n];
        for c in &self.components {
            let v = c.weighted_density(x.as_slice(), &mut scratch);
            let mut z = x.clone();
            for i in 0..n {
                z[i] -= c.mean[i];
            }
            let az = &c.inv_cov * &z;
            // v · [ (Σ⁻²z)(Σ⁻²z)ᵀ - Σ⁻² ]
            hess.ger(v, &az, &az, 1.0);
            hess -= c.inv_cov.clone() * v;
        }
        hess
    }
}

/// Normalized Gaussian density `C_Σ·exp{-½(x-x₀)ᵀΣ⁻²(x-x₀)}` with
/// `C_Σ = (2π)^{-n/2}/det Σ`, so the integral over `ℝⁿ` is one.
///
/// `sigma` is the covariance square root; it must be symmetric positive
/// definite.
pub fn gaussian_density(x0: &DVector<f64>, sigma: &DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    if x.len() != x0.len() {
        return invalid("evaluation point dimension mismatch");
    }
    let c = GaussianComponent::new(1.0, x0.clone(), sigma.clone())?;
    let p = PreparedGaussian::from_component(&c);
    let mut scratch = vec![0.0; x0.len()];
    Ok(p.weighted_density(x.as_slice(), &mut scratch))
}

/// Sample the mixture on every grid point. The empty mixture rasterizes to
/// the zero signal.
pub fn rasterize(gmm: &Gmm, grid: &Grid) -> Signal {
    if let Some(n) = gmm.dim() {
        assert_eq!(
            n,
            grid.dim(),
            "mixture dimension {} does not match grid dimension {}",
            n,
            grid.dim()
        );
    }
    let prepared = PreparedMixture::new(gmm, grid.dim());
    let mut out = Signal::zeros(grid.clone());
    let n = grid.dim();
    let mut point = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    for flat in 0..grid.len() {
        grid.write_point(flat, &mut point);
        out.values_mut()[flat] = prepared.value(&point, &mut scratch);
    }
    out
}

/// Mixture value at a point.
pub fn gmm_value(gmm: &Gmm, x: &DVector<f64>) -> f64 {
    let prepared = PreparedMixture::new(gmm, x.len());
    let mut scratch = vec![0.0; x.len()];
    prepared.value(x.as_slice(), &mut scratch)
}

/// Exact analytic gradient of the mixture at `x`.
pub fn gmm_gradient(gmm: &Gmm, x: &DVector<f64>) -> DVector<f64> {
    PreparedMixture::new(gmm, x.len()).gradient(x)
}

/// Exact analytic Hessian of the mixture at `x`; symmetric by construction.
pub fn gmm_hessian(gmm: &Gmm, x: &DVector<f64>) -> DMatrix<f64> {
    PreparedMixture::new(gmm, x.len()).hessian(x)
}

/// Unweighted sum of squared samples.
///
/// On a uniform grid the cell-volume weighting is a constant factor, so
/// minimizers of the fit objective are unchanged by leaving it out.
pub fn l2_sq(s: &Signal) -> f64 {
    s.values().iter().map(|v| v * v).sum()
}

/// Population variance (divide by N), two-pass.
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
}

/// Decibel ratio of two variances plus the raw quantities that formed it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrReport {
    pub snr_db: f64,
    pub variance_signal: f64,
    pub variance_residual_or_noise: f64,
}

/// `10·log10(Var(clean)/σ²)` for a known noise level.
pub fn snr_of_noise(clean: &Signal, noise_sigma: f64) -> Result<SnrReport> {
    if clean.values().len() < 2 {
        return invalid("SNR needs at least two samples");
    }
    if noise_sigma.is_nan() || noise_sigma <= 0.0 {
        return invalid("noise sigma must be positive");
    }
    let var = variance(clean.values());
    if var == 0.0 {
        return invalid("SNR of a constant signal is undefined");
    }
    let noise_var = noise_sigma * noise_sigma;
    Ok(SnrReport {
        snr_db: 10.0 * (var / noise_var).log10(),
        variance_signal: var,
        variance_residual_or_noise: noise_var,
    })
}

/// Stopping-criterion ratio `10·log10(Var(d_est)/Var(d-d_est))`.
///
/// A zero residual variance reports `+∞` rather than an error; a constant
/// estimate against a non-constant residual reports `-∞`.
pub fn snr_stop(d: &Signal, d_est: &Signal) -> Result<SnrReport> {
    if d.grid() != d_est.grid() {
        return invalid("signal and estimate live on different grids");
    }
    let var_est = variance(d_est.values());
    let residual = d.sub(d_est)?;
    let var_res = variance(residual.values());
    let snr_db = if var_res == 0.0 {
        f64::INFINITY
    } else if var_est == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * (var_est / var_res).log10()
    };
    Ok(SnrReport {
        snr_db,
        variance_signal: var_est,
        variance_residual_or_noise: var_res,
    })
}

/// Noise standard deviation that realizes a target SNR against `clean`:
/// `σ = √(Var(clean)/10^(SNR/10))`.
pub fn noise_sigma_for_snr(clean: &Signal, snr_db: f64) -> Result<f64> {
    let var = variance(clean.values());
    if var == 0.0 {
        return invalid("cannot choose a noise level for a constant signal");
    }
    Ok((var / 10f64.powf(snr_db / 10.0)).sqrt())
}

/// Add i.i.d. Gaussian noise from a seeded generator, in flat-index order.
///
/// The stream is the ChaCha12 generator with `rand_distr`'s ziggurat
/// normal sampler, which the file formats record for reproducibility.
pub fn add_gaussian_noise(clean: &Signal, noise_sigma: f64, seed: u64) -> Result<Signal> {
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return invalid("noise sigma must be finite and non-negative");
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sigma)
        .map_err(|e| crate::error::GmmError::InvalidArgument(e.to_string()))?;
    let values = clean
        .values()
        .iter()
        .map(|v| v + normal.sample(&mut rng))
        .collect();
    Signal::new(clean.grid().clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spherical(weight: f64, mean: &[f64], sigma: f64) -> GaussianComponent {
        GaussianComponent::spherical(weight, mean, sigma).unwrap()
    }

    #[test]
    fn standard_normal_peaks() {
        let d = gaussian_density(
            &DVector::from_column_slice(&[0.0]),
            &DMatrix::identity(1, 1),
            &DVector::from_column_slice(&[0.0]),
        )
        .unwrap();
        assert_relative_eq!(d, 1.0 / (2.0 * PI).sqrt(), epsilon = 1e-15);

        let d = gaussian_density(
            &DVector::from_column_slice(&[0.0, 0.0]),
            &DMatrix::identity(2, 2),
            &DVector::from_column_slice(&[0.0, 0.0]),
        )
        .unwrap();
        assert_relative_eq!(d, 1.0 / (2.0 * PI), epsilon = 1e-15);
    }

    #[test]
    fn density_matches_quadrature_oracle() {
        // 1D, sigma = 2 (variance 4): compare against the unnormalized
        // exponential divided by its trapezoid integral over a wide range.
        let sigma = 2.0;
        let m = 400_000usize;
        let lo = -40.0;
        let hi = 40.0;
        let h = (hi - lo) / m as f64;
        let f = |x: f64| (-x * x / (2.0 * sigma * sigma)).exp();
        let mut z = 0.5 * (f(lo) + f(hi));
        for i in 1..m {
            z += f(lo + i as f64 * h);
        }
        z *= h;
        let d = gaussian_density(
            &DVector::from_column_slice(&[0.0]),
            &DMatrix::from_row_slice(1, 1, &[sigma]),
            &DVector::from_column_slice(&[2.0]),
        )
        .unwrap();
        assert_relative_eq!(d, f(2.0) / z, max_relative = 1e-9);
    }

    #[test]
    fn density_riemann_sum_is_one() {
        // Normalization check on a wide fine grid.
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]);
        let comp =
            GaussianComponent::new(1.0, DVector::from_column_slice(&[0.5, -0.2]), sigma).unwrap();
        let g = Grid::uniform(&[-11.5, -12.2], &[0.1, 0.1], &[241, 241]).unwrap();
        let s = rasterize(&Gmm::from(comp), &g);
        let cell = 0.1 * 0.1;
        let total: f64 = s.values().iter().sum::<f64>() * cell;
        assert!((total - 1.0).abs() < 1e-3, "riemann sum {}", total);
    }

    #[test]
    fn density_rejects_bad_sigma() {
        let x0 = DVector::from_column_slice(&[0.0, 0.0]);
        let x = DVector::from_column_slice(&[1.0, 0.0]);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.1, 1.0]);
        assert!(gaussian_density(&x0, &asym, &x).is_err());
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(gaussian_density(&x0, &singular, &x).is_err());
    }

    #[test]
    fn rasterize_empty_and_linear() {
        let g = Grid::uniform(&[-1.0], &[0.5], &[9]).unwrap();
        let zero = rasterize(&Gmm::empty(), &g);
        assert!(zero.values().iter().all(|&v| v == 0.0));

        let c1 = spherical(1.0, &[0.3], 0.7);
        let c3 = spherical(3.0, &[0.3], 0.7);
        let r1 = rasterize(&Gmm::from(c1), &g);
        let r3 = rasterize(&Gmm::from(c3), &g);
        for (a, b) in r1.values().iter().zip(r3.values()) {
            assert_relative_eq!(3.0 * a, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn gradient_zero_at_single_mean() {
        let c = spherical(2.0, &[0.4, -1.0], 1.3);
        let g = gmm_gradient(&Gmm::from(c), &DVector::from_column_slice(&[0.4, -1.0]));
        assert!(g.norm() < 1e-15);
    }

    #[test]
    fn hessian_at_mean_of_unit_spherical() {
        // Single spherical Gaussian σ=1 at its mean: H = -C_Σ·a·I.
        let a = 1.7;
        let c = spherical(a, &[0.0, 0.0], 1.0);
        let h = gmm_hessian(&Gmm::from(c), &DVector::from_column_slice(&[0.0, 0.0]));
        let expected = -a / (2.0 * PI);
        assert_relative_eq!(h[(0, 0)], expected, epsilon = 1e-14);
        assert_relative_eq!(h[(1, 1)], expected, epsilon = 1e-14);
        assert!(h[(0, 1)].abs() < 1e-15 && h[(1, 0)].abs() < 1e-15);
    }

    #[test]
    fn l2_sq_cases() {
        let g = Grid::uniform(&[0.0], &[1.0], &[2]).unwrap();
        assert_eq!(l2_sq(&Signal::zeros(g.clone())), 0.0);
        let s = Signal::new(g, vec![3.0, 4.0]).unwrap();
        assert_eq!(l2_sq(&s), 25.0);
    }

    #[test]
    fn snr_of_noise_from_definition() {
        let g = Grid::uniform(&[0.0], &[1.0], &[2]).unwrap();
        // Values {0, 20}: population variance 100.
        let s = Signal::new(g.clone(), vec![0.0, 20.0]).unwrap();
        let r = snr_of_noise(&s, 1.0).unwrap();
        assert_relative_eq!(r.snr_db, 20.0, epsilon = 1e-12);
        assert_relative_eq!(r.variance_signal, 100.0, epsilon = 1e-12);

        // Variance 1 vs σ=1 is 0 dB.
        let s = Signal::new(g.clone(), vec![0.0, 2.0]).unwrap();
        assert_relative_eq!(snr_of_noise(&s, 1.0).unwrap().snr_db, 0.0, epsilon = 1e-12);

        let flat = Signal::new(g, vec![1.0, 1.0]).unwrap();
        assert!(snr_of_noise(&flat, 1.0).is_err());
    }

    #[test]
    fn snr_stop_sentinels_and_values() {
        let g = Grid::uniform(&[0.0], &[1.0], &[4]).unwrap();
        let d = Signal::new(g.clone(), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let exact = snr_stop(&d, &d).unwrap();
        assert!(exact.snr_db.is_infinite() && exact.snr_db > 0.0);

        // Var(d_est) = 10·Var(d - d_est) gives exactly 10 dB.
        let est = Signal::new(g.clone(), vec![0.0, 10.0, 0.0, 10.0]).unwrap();
        let t: Vec<f64> = est
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v + if i % 2 == 0 { 0.0 } else { (10.0f64).sqrt() })
            .collect();
        let d2 = Signal::new(g.clone(), t).unwrap();
        let r = snr_stop(&d2, &est).unwrap();
        assert_relative_eq!(r.snr_db, 10.0, epsilon = 1e-12);

        let other = Grid::uniform(&[0.0], &[2.0], &[4]).unwrap();
        let e2 = Signal::zeros(other);
        assert!(snr_stop(&d, &e2).is_err());
    }

    #[test]
    fn noise_sigma_inversion_is_self_consistent() {
        let g = Grid::uniform(&[-10.0], &[0.02], &[1001]).unwrap();
        let c = spherical(8.0, &[0.0], 2.0);
        let clean = rasterize(&Gmm::from(c), &g);
        let sigma = noise_sigma_for_snr(&clean, 20.0).unwrap();
        let r = snr_of_noise(&clean, sigma).unwrap();
        assert_relative_eq!(r.snr_db, 20.0, epsilon = 1e-12);
    }

    #[test]
    fn noise_stream_is_deterministic_and_zero_sigma_is_identity() {
        let g = Grid::uniform(&[0.0], &[1.0], &[64]).unwrap();
        let clean = Signal::new(g, (0..64).map(|i| i as f64).collect()).unwrap();
        let a = add_gaussian_noise(&clean, 0.5, 7).unwrap();
        let b = add_gaussian_noise(&clean, 0.5, 7).unwrap();
        assert_eq!(a.values(), b.values());
        let c = add_gaussian_noise(&clean, 0.0, 7).unwrap();
        assert_eq!(c.values(), clean.values());
    }
}
