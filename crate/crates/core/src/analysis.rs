//! Mode geometry: locating local maxima of a mixture, certifying the
//! distance from each mode to the nearest mean against the
//! `√n·σ_max²/σ_min` bound, the family that shows the bound is nearly
//! attained, Monte-Carlo checks of the sphere-moment identities behind it,
//! and a lattice quasi-interpolant that approximates smooth functions by
//! mixtures.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::eval::{rasterize, PreparedMixture};
use crate::grid::Grid;
use crate::linalg;
use crate::mixture::{GaussianComponent, Gmm};

/// A certified local maximum of a mixture.
#[derive(Debug, Clone)]
pub struct Mode {
    pub location: DVector<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    /// Smallest (most negative) Hessian eigenvalue at the mode.
    pub hessian_eigen_min: f64,
    /// Largest Hessian eigenvalue; certification requires it to be
    /// non-positive up to a tolerance relative to the smallest.
    pub hessian_eigen_max: f64,
}

#[derive(Debug, Clone)]
pub struct ModeSearchOptions {
    /// Gradient-norm tolerance relative to the peak rasterized value.
    pub gtol_rel: f64,
    /// Converged points closer than this are considered one mode;
    /// `None` means a tenth of the smallest grid spacing.
    pub dedupe_radius: Option<f64>,
    pub max_ascent_iter: usize,
}

impl Default for ModeSearchOptions {
    fn default() -> Self {
        ModeSearchOptions {
            gtol_rel: 1e-10,
            dedupe_radius: None,
            max_ascent_iter: 200,
        }
    }
}

/// Modes found from one search grid, plus how many seeds failed to converge
/// or certify.
#[derive(Debug, Clone)]
pub struct ModeSearch {
    pub modes: Vec<Mode>,
    pub dropped_seeds: usize,
}

/// Distance-to-mean certificate for one mode: the component minimizing
/// `distance / (√n·σ_max²·σ_min⁻¹)`. For a valid mixture the ratio never
/// exceeds one; a violation signals a defect.
#[derive(Debug, Clone)]
pub struct BoundCertificate {
    pub mode: Mode,
    pub component: usize,
    pub distance: f64,
    pub bound: f64,
    pub ratio: f64,
}

/// Indices of the lattice window of radius one around `flat`, clamped at
/// the borders. The point itself is excluded.
fn lattice_window(grid: &Grid, flat: usize) -> Vec<usize> {
    let multi = grid.multi_index(flat);
    let n = grid.dim();
    let mut out = Vec::with_capacity(3usize.pow(n as u32) - 1);
    let mut offsets = vec![-1i64; n];
    loop {
        let mut skip = false;
        let mut neighbor = Vec::with_capacity(n);
        let mut all_zero = true;
        for axis in 0..n {
            let i = multi[axis] as i64 + offsets[axis];
            if offsets[axis] != 0 {
                all_zero = false;
            }
            if i < 0 || i >= grid.counts()[axis] as i64 {
                skip = true;
                break;
            }
            neighbor.push(i as usize);
        }
        if !skip && !all_zero {
            out.push(grid.flat_index(&neighbor));
        }
        // Advance the offset odometer.
        let mut axis = 0;
        loop {
            if axis == n {
                return out;
            }
            offsets[axis] += 1;
            if offsets[axis] <= 1 {
                break;
            }
            offsets[axis] = -1;
            axis += 1;
        }
    }
}

/// Locate the local maxima of `gmm` by ascending from every strict local
/// maximum of its rasterization on `search_grid`.
///
/// Each ascent takes Newton steps while the Hessian is negative definite
/// and falls back to backtracking gradient ascent otherwise. Converged
/// points are certified (small gradient, non-positive largest Hessian
/// eigenvalue) and deduplicated; seeds that fail either step are counted in
/// `dropped_seeds`.
pub fn find_modes(gmm: &Gmm, search_grid: &Grid, opts: &ModeSearchOptions) -> Result<ModeSearch> {
    if gmm.is_empty() {
        return invalid("cannot search for modes of an empty mixture");
    }
    let n = gmm.dim().expect("non-empty");
    if n != search_grid.dim() {
        return invalid("search grid dimension does not match the mixture");
    }
    let raster = rasterize(gmm, search_grid);
    let peak = raster.values().iter().cloned().fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return Ok(ModeSearch {
            modes: Vec::new(),
            dropped_seeds: 0,
        });
    }
    let gtol = opts.gtol_rel * peak;
    // Values below this are numerical dust, not certifiable modes.
    let value_floor = 1e-12 * peak;
    let dedupe_radius = opts
        .dedupe_radius
        .unwrap_or(search_grid.min_spacing() / 10.0);

    let prepared = PreparedMixture::new(gmm, n);
    let mut scratch = vec![0.0; n];

    let mut seeds = Vec::new();
    for flat in 0..search_grid.len() {
        let v = raster.values()[flat];
        if v <= value_floor {
            continue;
        }
        if lattice_window(search_grid, flat)
            .into_iter()
            .all(|j| raster.values()[j] < v)
        {
            seeds.push(flat);
        }
    }

    let mut modes: Vec<Mode> = Vec::new();
    let mut dropped = 0usize;
    'seed: for &flat in &seeds {
        let mut x = DVector::from_vec(search_grid.point(flat));
        let mut fx = prepared.value(x.as_slice(), &mut scratch);
        let mut converged = false;
        for _ in 0..opts.max_ascent_iter {
            let grad = prepared.gradient(&x);
            if grad.norm() < gtol {
                converged = true;
                break;
            }
            let hess = prepared.hessian(&x);
            let (_, eig_max) = linalg::eigen_range(&hess);
            let mut stepped = false;
            if eig_max < 0.0 {
                // Newton step toward the critical point of the local model.
                if let Some(step) = hess.clone().lu().solve(&(-&grad)) {
                    let mut t = 1.0;
                    for _ in 0..30 {
                        let cand = &x + &step * t;
                        let fc = prepared.value(cand.as_slice(), &mut scratch);
                        if fc >= fx {
                            x = cand;
                            fx = fc;
                            stepped = true;
                            break;
                        }
                        t *= 0.5;
                    }
                }
            }
            if !stepped {
                // Gradient ascent, first trial moves about one grid cell.
                let gn = grad.norm();
                let mut t = search_grid.min_spacing() / gn;
                let mut improved = false;
                for _ in 0..60 {
                    let cand = &x + &grad * t;
                    let fc = prepared.value(cand.as_slice(), &mut scratch);
                    if fc > fx {
                        x = cand;
                        fx = fc;
                        improved = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !improved {
                    dropped += 1;
                    continue 'seed;
                }
            }
        }
        if !converged {
            dropped += 1;
            continue;
        }
        // Certification.
        let grad_norm = prepared.gradient(&x).norm();
        let hess = prepared.hessian(&x);
        let (eig_min, eig_max) = linalg::eigen_range(&hess);
        let fx = prepared.value(x.as_slice(), &mut scratch);
        if grad_norm >= gtol || eig_max > 1e-8 * eig_min.abs() || fx < value_floor {
            dropped += 1;
            continue;
        }
        if modes
            .iter()
            .any(|m| (&m.location - &x).norm() <= dedupe_radius)
        {
            continue;
        }
        modes.push(Mode {
            location: x,
            value: fx,
            gradient_norm: grad_norm,
            hessian_eigen_min: eig_min,
            hessian_eigen_max: eig_max,
        });
    }
    Ok(ModeSearch {
        modes,
        dropped_seeds: dropped,
    })
}

/// Certify one mode against the distance bound, choosing the component
/// that minimizes `distance/bound`.
pub fn certify_bound(gmm: &Gmm, mode: &Mode) -> Result<BoundCertificate> {
    if gmm.is_empty() {
        return invalid("cannot certify against an empty mixture");
    }
    let n = gmm.dim().expect("non-empty") as f64;
    let mut best: Option<BoundCertificate> = None;
    for (idx, comp) in gmm.iter().enumerate() {
        let (sigma_min, sigma_max) = linalg::eigen_range(comp.sigma());
        let bound = n.sqrt() * sigma_max * sigma_max / sigma_min;
        let distance = (&mode.location - comp.mean()).norm();
        let ratio = distance / bound;
        if best.as_ref().is_none_or(|b| ratio < b.ratio) {
            best = Some(BoundCertificate {
                mode: mode.clone(),
                component: idx,
                distance,
                bound,
                ratio,
            });
        }
    }
    Ok(best.expect("at least one component"))
}

/// The `2n`-component spherical mixture with common variance `σ²`, common
/// amplitude `a` and means at `±(√n·σ - ε)·e_i`. Its central mode sits at
/// distance `√n·σ - ε` from every mean, so the distance bound is within
/// `ε` of being attained.
pub fn tightness_family(n: usize, sigma: f64, amplitude: f64, eps: f64) -> Result<Gmm> {
    if n == 0 {
        return invalid("dimension must be at least 1");
    }
    if sigma.is_nan() || sigma <= 0.0 || amplitude.is_nan() || amplitude <= 0.0 {
        return invalid("sigma and amplitude must be positive");
    }
    let reach = (n as f64).sqrt() * sigma;
    if eps.is_nan() || eps <= 0.0 || eps >= reach {
        return invalid("eps must lie strictly between 0 and √n·σ");
    }
    let r = reach - eps;
    let mut components = Vec::with_capacity(2 * n);
    for axis in 0..n {
        for sign in [1.0, -1.0] {
            let mut mean = vec![0.0; n];
            mean[axis] = sign * r;
            components.push(GaussianComponent::spherical(amplitude, &mean, sigma)?);
        }
    }
    Gmm::new(components)
}

/// A Monte-Carlo estimate next to its reference value.
#[derive(Debug, Clone, Copy)]
pub struct MonteCarloCheck {
    pub estimate: f64,
    pub reference: f64,
}

impl MonteCarloCheck {
    pub fn relative_error(&self) -> f64 {
        let scale = self
            .estimate
            .abs()
            .max(self.reference.abs())
            .max(f64::MIN_POSITIVE);
        (self.estimate - self.reference).abs() / scale
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Γ(half/2) for positive integer `half`.
fn gamma_of_half(half: usize) -> f64 {
    if half.is_multiple_of(2) {
        factorial(half / 2 - 1)
    } else {
        let j = half / 2; // half = 2j + 1
        factorial(2 * j) / (4f64.powi(j as i32) * factorial(j)) * PI.sqrt()
    }
}

/// Surface area of the unit sphere `S^{n-1}` in `ℝⁿ`.
fn sphere_area(n: usize) -> f64 {
    2.0 * PI.powf(n as f64 / 2.0) / gamma_of_half(n)
}

fn sample_unit_sphere(rng: &mut ChaCha12Rng, n: usize, out: &mut [f64]) {
    loop {
        let mut norm_sq = 0.0;
        for o in out.iter_mut().take(n) {
            let g: f64 = StandardNormal.sample(rng);
            *o = g;
            norm_sq += g * g;
        }
        if norm_sq > 1e-300 {
            let inv = norm_sq.sqrt().recip();
            for o in out.iter_mut().take(n) {
                *o *= inv;
            }
            return;
        }
    }
}

/// Monte-Carlo check of `∫_{S^{n-1}} (x,y)^k dy = |x|^k·C_k`: the left side
/// is estimated directly, the right side scales an independent estimate of
/// `C_k = ∫ (e₁,y)^k dy`. The constant also depends on the dimension, which
/// is fixed by `x` here.
pub fn sphere_moment_check(
    k: usize,
    x: &[f64],
    samples: usize,
    seed: u64,
) -> Result<MonteCarloCheck> {
    if !k.is_multiple_of(2) {
        return invalid("moment order k must be even");
    }
    let n = x.len();
    if n == 0 {
        return invalid("x must have at least one coordinate");
    }
    if samples < 10_000 {
        return invalid("at least 10⁴ samples are required");
    }
    let area = sphere_area(n);
    let norm_x = x.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut y = vec![0.0; n];
    let mut acc = 0.0;
    for _ in 0..samples {
        sample_unit_sphere(&mut rng, n, &mut y);
        let dot: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        acc += dot.powi(k as i32);
    }
    let estimate = area * acc / samples as f64;

    // Independent stream for the constant.
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut acc = 0.0;
    for _ in 0..samples {
        sample_unit_sphere(&mut rng, n, &mut y);
        acc += y[0].powi(k as i32);
    }
    let c_k = area * acc / samples as f64;
    let reference = norm_x.powi(k as i32) * c_k;
    Ok(MonteCarloCheck {
        estimate,
        reference,
    })
}

/// Monte-Carlo check of the trace identity `∫_{S^{n-1}} (y, Ay) dy =
/// Tr(A)·C₂` for a symmetric matrix `A`.
pub fn sphere_trace_check(a: &DMatrix<f64>, samples: usize, seed: u64) -> Result<MonteCarloCheck> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return invalid("matrix must be square and non-empty");
    }
    if linalg::asymmetry(a) > 1e-12 {
        return invalid("matrix must be symmetric");
    }
    if samples < 10_000 {
        return invalid("at least 10⁴ samples are required");
    }
    let area = sphere_area(n);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut y = vec![0.0; n];
    let mut acc = 0.0;
    for _ in 0..samples {
        sample_unit_sphere(&mut rng, n, &mut y);
        let yv = DVector::from_column_slice(&y);
        acc += yv.dot(&(a * &yv));
    }
    let estimate = area * acc / samples as f64;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut acc = 0.0;
    for _ in 0..samples {
        sample_unit_sphere(&mut rng, n, &mut y);
        acc += y[0] * y[0];
    }
    let c2 = area * acc / samples as f64;
    let reference = a.trace() * c2;
    Ok(MonteCarloCheck {
        estimate,
        reference,
    })
}

/// Lattice quasi-interpolant of a non-negative compactly supported function:
/// one isotropic atom per lattice point `h·m` inside the support box, with
/// covariance `D·h²·I`.
///
/// The atom weight `hⁿ·u(hm)` absorbs all kernel constants, making the
/// mixture a Riemann-sum approximation of `u` convolved with a Gaussian of
/// width `√D·h`; the sup-norm error vanishes as `h` shrinks for fixed `D`.
/// Zero-weight atoms are omitted.
pub fn quasi_interpolant<F: Fn(&[f64]) -> f64>(
    u: F,
    support_lo: &[f64],
    support_hi: &[f64],
    h: f64,
    d_scale: f64,
) -> Result<Gmm> {
    let n = support_lo.len();
    if n == 0 || support_hi.len() != n {
        return invalid("support box corners must share a positive dimension");
    }
    if h.is_nan() || h <= 0.0 || d_scale.is_nan() || d_scale <= 0.0 {
        return invalid("h and D must be positive");
    }
    if support_lo.iter().zip(support_hi).any(|(l, h)| l > h) {
        return invalid("support box is empty");
    }
    let lo: Vec<i64> = support_lo
        .iter()
        .map(|&l| ((l / h) - 1e-12).ceil() as i64)
        .collect();
    let hi: Vec<i64> = support_hi
        .iter()
        .map(|&u| ((u / h) + 1e-12).floor() as i64)
        .collect();
    if lo.iter().zip(&hi).any(|(l, h)| l > h) {
        return Ok(Gmm::empty());
    }
    let kernel_sigma = d_scale.sqrt() * h;
    let cell = h.powi(n as i32);
    let mut components = Vec::new();
    let mut m = lo.clone();
    loop {
        let point: Vec<f64> = m.iter().map(|&i| i as f64 * h).collect();
        let sample = u(&point);
        if sample < 0.0 {
            return invalid("u must be non-negative on its support");
        }
        if sample > 0.0 {
            components.push(GaussianComponent::spherical(
                cell * sample,
                &point,
                kernel_sigma,
            )?);
        }
        // Odometer over the lattice box.
        let mut axis = 0;
        loop {
            if axis == n {
                return Gmm::new(components);
            }
            m[axis] += 1;
            if m[axis] <= hi[axis] {
                break;
            }
            m[axis] = lo[axis];
            axis += 1;
        }
    }
}
