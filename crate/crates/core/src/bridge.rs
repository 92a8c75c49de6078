//! Conversions between point clouds and grid signals, plus a baseline
//! full-covariance EM fitter for comparison experiments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::grid::{Grid, PointCloud, Signal};
use crate::linalg;
use crate::mixture::{GaussianComponent, Gmm};

/// EM settings. A non-positive `cov_floor` selects the automatic floor
/// `1e-6·(data extent)²` at fit time.
#[derive(Debug, Clone)]
pub struct EmConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Convergence threshold on the mean log-likelihood change per point.
    pub tol: f64,
    /// Eigenvalue floor for component covariances.
    pub cov_floor: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl EmConfig {
    pub fn new(k: usize, seed: u64) -> EmConfig {
        EmConfig {
            k,
            max_iter: 200,
            tol: 1e-9,
            cov_floor: 0.0,
            seed,
            restarts: 1,
        }
    }
}

/// Result of an EM fit: the best restart by final log-likelihood.
#[derive(Debug, Clone)]
pub struct EmFit {
    /// Mixture with weights summing to one.
    pub gmm: Gmm,
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Components re-seeded after losing all responsibility mass.
    pub reseeds: usize,
    /// Total log-likelihood after every iteration of the winning restart.
    pub ll_history: Vec<f64>,
}

/// Compensated (Kahan) summation; log-likelihood sums over 10⁵ points need
/// the extra care for the monotonicity checks.
fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for v in values {
        let y = v - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Count points at their nearest grid node. Points outside the grid
/// bounding box expanded by half a cell are dropped; the second return is
/// the drop count.
pub fn histogram(points: &PointCloud, grid: &Grid) -> Result<(Signal, usize)> {
    if points.dim() != grid.dim() {
        return invalid("point cloud and grid dimensions disagree");
    }
    let mut out = Signal::zeros(grid.clone());
    let mut dropped = 0usize;
    for p in points.iter() {
        match grid.nearest_index(p) {
            Some(flat) => out.values_mut()[flat] += 1.0,
            None => dropped += 1,
        }
    }
    Ok((out, dropped))
}

/// Turn a non-negative signal into a point cloud with roughly
/// `target_count` points: grid point `y` contributes `⌊C·max(d(y),0)⌋`
/// copies with `C = target_count / Σ_y max(d(y),0)`, emitted in flat-index
/// order.
pub fn signal_to_points(d: &Signal, target_count: usize) -> Result<PointCloud> {
    if target_count == 0 {
        return invalid("target count must be positive");
    }
    let total: f64 = d.values().iter().map(|v| v.max(0.0)).sum();
    if total.is_nan() || total <= 0.0 {
        return invalid("signal has no positive mass");
    }
    let c = target_count as f64 / total;
    let grid = d.grid();
    let mut cloud = PointCloud::empty(grid.dim());
    let mut point = vec![0.0; grid.dim()];
    for (flat, v) in d.values().iter().enumerate() {
        let copies = (c * v.max(0.0)).floor() as usize;
        if copies == 0 {
            continue;
        }
        grid.write_point(flat, &mut point);
        for _ in 0..copies {
            cloud.push(&point);
        }
    }
    Ok(cloud)
}

/// Draw `count` points from the mixture (weights normalized internally).
pub fn sample_gmm(gmm: &Gmm, count: usize, seed: u64) -> Result<PointCloud> {
    let total = gmm.total_weight();
    if gmm.is_empty() || total.is_nan() || total <= 0.0 {
        return invalid("cannot sample from a mixture without positive mass");
    }
    let n = gmm.dim().expect("non-empty");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut cloud = PointCloud::empty(n);
    let mut point = vec![0.0; n];
    for _ in 0..count {
        let mut pick: f64 = rng.random::<f64>() * total;
        let mut chosen = gmm.len() - 1;
        for (i, c) in gmm.iter().enumerate() {
            pick -= c.weight();
            if pick <= 0.0 {
                chosen = i;
                break;
            }
        }
        let comp = &gmm.components()[chosen];
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let x = comp.mean() + comp.sigma() * z;
        for (j, o) in point.iter_mut().enumerate() {
            *o = x[j];
        }
        cloud.push(&point);
    }
    Ok(cloud)
}

/// Weights scaled to sum to one; means and Σ untouched.
pub fn normalize_gmm(gmm: &Gmm) -> Result<Gmm> {
    gmm.normalized()
}

/// One mixture component reduced to what the likelihood loops need: the
/// lower Cholesky factor of the covariance stored flat, and the combined
/// log weight and normalizer.
struct EmComponent {
    mean: Vec<f64>,
    /// Row-major lower triangle of L with `Σ² = L·Lᵀ`.
    l_flat: Vec<f64>,
    /// `log w - ½(n·log 2π + log det Σ²)`
    log_scale: f64,
}

impl EmComponent {
    fn new(weight: f64, mean: &[f64], cov: &DMatrix<f64>) -> Result<EmComponent> {
        let n = mean.len();
        let chol = nalgebra::Cholesky::new(cov.clone()).ok_or_else(|| {
            crate::error::GmmError::Internal("floored covariance must factor".into())
        })?;
        let l = chol.l_dirty();
        let mut l_flat = Vec::with_capacity(n * (n + 1) / 2);
        let mut log_det_cov = 0.0;
        for i in 0..n {
            for j in 0..=i {
                l_flat.push(l[(i, j)]);
            }
            log_det_cov += 2.0 * l[(i, i)].ln();
        }
        let log_scale =
            weight.ln() - 0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det_cov);
        Ok(EmComponent {
            mean: mean.to_vec(),
            l_flat,
            log_scale,
        })
    }

    /// `log w + log N(p)` via one in-place forward substitution.
    #[inline]
    fn log_weighted_density(&self, p: &[f64], scratch: &mut [f64]) -> f64 {
        let n = self.mean.len();
        let mut q = 0.0;
        for i in 0..n {
            let row = &self.l_flat[i * (i + 1) / 2..];
            let mut acc = p[i] - self.mean[i];
            for j in 0..i {
                acc -= row[j] * scratch[j];
            }
            let w = acc / row[i];
            scratch[i] = w;
            q += w * w;
        }
        self.log_scale - 0.5 * q
    }
}

/// Full-covariance EM: vanilla random-point initialization, responsibility
/// E-step, moment M-step with an eigenvalue floor on covariances, best of
/// `restarts` seeded runs by final log-likelihood.
pub fn em_fit(points: &PointCloud, cfg: &EmConfig) -> Result<EmFit> {
    let count = points.len();
    let n = points.dim();
    if cfg.k == 0 {
        return invalid("k must be at least 1");
    }
    if count < cfg.k {
        return invalid("need at least k points");
    }
    if cfg.restarts == 0 {
        return invalid("at least one restart is required");
    }

    // Global sample moments for initialization and the automatic floor.
    let mut global_mean = DVector::zeros(n);
    for p in points.iter() {
        for j in 0..n {
            global_mean[j] += p[j];
        }
    }
    global_mean /= count as f64;
    let mut global_cov = DMatrix::zeros(n, n);
    let mut z = DVector::zeros(n);
    for p in points.iter() {
        for j in 0..n {
            z[j] = p[j] - global_mean[j];
        }
        global_cov.ger(1.0, &z, &z, 1.0);
    }
    global_cov /= count as f64;

    let mut extent = 0.0f64;
    for j in 0..n {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in points.iter() {
            lo = lo.min(p[j]);
            hi = hi.max(p[j]);
        }
        extent = extent.max(hi - lo);
    }
    let floor = if cfg.cov_floor > 0.0 {
        cfg.cov_floor
    } else if extent > 0.0 {
        1e-6 * extent * extent
    } else {
        1e-12
    };
    let floor_cov = |cov: &DMatrix<f64>| -> DMatrix<f64> {
        let root = linalg::spd_sqrt_floored(cov, floor);
        &root * &root
    };
    let init_cov = floor_cov(&global_cov);

    let mut best: Option<EmFit> = None;
    for restart in 0..cfg.restarts {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        rng.set_stream(restart as u64);

        // Means drawn uniformly from the data without replacement.
        let mut indices: Vec<usize> = Vec::with_capacity(cfg.k);
        while indices.len() < cfg.k {
            let i = rng.random_range(0..count);
            if !indices.contains(&i) {
                indices.push(i);
            }
        }
        let mut weights = vec![1.0 / cfg.k as f64; cfg.k];
        let mut means: Vec<DVector<f64>> = indices
            .iter()
            .map(|&i| DVector::from_column_slice(points.point(i)))
            .collect();
        let mut covs: Vec<DMatrix<f64>> = vec![init_cov.clone(); cfg.k];

        let mut resp = vec![0.0f64; cfg.k * count];
        let mut ll_history = Vec::new();
        let mut reseeds = 0usize;
        let mut iterations = 0usize;
        let mut prev_ll = f64::NEG_INFINITY;
        let mut logs = vec![0.0f64; cfg.k];
        let mut solve_scratch = vec![0.0f64; n];

        for iter in 0..cfg.max_iter {
            iterations = iter + 1;
            let comps: Vec<EmComponent> = (0..cfg.k)
                .map(|m| EmComponent::new(weights[m], means[m].as_slice(), &covs[m]))
                .collect::<Result<_>>()?;

            // E-step with the usual log-sum-exp stabilization.
            let mut ll = 0.0;
            let mut ll_carry = 0.0;
            for (pi, p) in points.iter().enumerate() {
                let mut max_log = f64::NEG_INFINITY;
                for m in 0..cfg.k {
                    let l = comps[m].log_weighted_density(p, &mut solve_scratch);
                    logs[m] = l;
                    max_log = max_log.max(l);
                }
                let point_ll = if max_log == f64::NEG_INFINITY {
                    // Degenerate: uniform responsibilities.
                    for m in 0..cfg.k {
                        resp[m * count + pi] = 1.0 / cfg.k as f64;
                    }
                    f64::NEG_INFINITY
                } else {
                    let mut denom = 0.0;
                    for m in 0..cfg.k {
                        let e = (logs[m] - max_log).exp();
                        resp[m * count + pi] = e;
                        denom += e;
                    }
                    let inv = denom.recip();
                    for m in 0..cfg.k {
                        resp[m * count + pi] *= inv;
                    }
                    max_log + denom.ln()
                };
                // Kahan accumulation of the total log-likelihood.
                let y = point_ll - ll_carry;
                let t = ll + y;
                ll_carry = (t - ll) - y;
                ll = t;
            }
            ll_history.push(ll);

            if (ll - prev_ll).abs() / count as f64 <= cfg.tol {
                break;
            }
            prev_ll = ll;

            // M-step.
            for m in 0..cfg.k {
                let r = &resp[m * count..(m + 1) * count];
                let mass = kahan_sum(r.iter().cloned());
                if mass <= 1e-10 {
                    // Lost cluster: re-seed from a random point.
                    let i = rng.random_range(0..count);
                    means[m] = DVector::from_column_slice(points.point(i));
                    covs[m] = init_cov.clone();
                    weights[m] = 1.0 / count as f64;
                    reseeds += 1;
                    continue;
                }
                let inv_mass = mass.recip();
                let mut mean = vec![0.0f64; n];
                for (pi, p) in points.iter().enumerate() {
                    let w = r[pi];
                    for j in 0..n {
                        mean[j] += w * p[j];
                    }
                }
                for v in &mut mean {
                    *v *= inv_mass;
                }
                // Lower triangle of the weighted scatter.
                let mut scatter = vec![0.0f64; n * (n + 1) / 2];
                for (pi, p) in points.iter().enumerate() {
                    let w = r[pi];
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        z[j] = p[j] - mean[j];
                    }
                    let mut idx = 0;
                    for i in 0..n {
                        let wzi = w * z[i];
                        for jj in 0..=i {
                            scatter[idx] += wzi * z[jj];
                            idx += 1;
                        }
                    }
                }
                let mut cov = DMatrix::zeros(n, n);
                let mut idx = 0;
                for i in 0..n {
                    for jj in 0..=i {
                        let v = scatter[idx] * inv_mass;
                        cov[(i, jj)] = v;
                        cov[(jj, i)] = v;
                        idx += 1;
                    }
                }
                means[m] = DVector::from_vec(mean);
                covs[m] = floor_cov(&cov);
                weights[m] = mass / count as f64;
            }
            let wsum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= wsum;
            }
        }

        let final_ll = *ll_history.last().expect("at least one iteration");
        if best.as_ref().is_none_or(|b| final_ll > b.log_likelihood) {
            let components = (0..cfg.k)
                .map(|m| {
                    GaussianComponent::new(
                        weights[m],
                        means[m].clone(),
                        linalg::spd_sqrt_floored(&covs[m], 0.0),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            best = Some(EmFit {
                gmm: Gmm::new(components)?.normalized()?,
                log_likelihood: final_ll,
                iterations,
                reseeds,
                ll_history,
            });
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Total log-likelihood of a point cloud under a normalized mixture.
/// Points with zero density produce the `-∞` sentinel rather than an error.
pub fn log_likelihood(points: &PointCloud, gmm: &Gmm) -> Result<f64> {
    if gmm.is_empty() {
        return invalid("mixture must be non-empty");
    }
    let n = gmm.dim().expect("non-empty");
    if n != points.dim() {
        return invalid("point cloud and mixture dimensions disagree");
    }
    if (gmm.total_weight() - 1.0).abs() > 1e-9 {
        return invalid("mixture weights must sum to one");
    }
    let comps: Vec<EmComponent> = gmm
        .iter()
        .filter(|c| c.weight() > 0.0)
        .map(|c| EmComponent::new(c.weight(), c.mean().as_slice(), &c.covariance()))
        .collect::<Result<_>>()?;
    if comps.is_empty() {
        return invalid("mixture has no positive-weight component");
    }
    // Densities that underflow to zero in linear space report -inf.
    let zero_log = f64::MIN_POSITIVE.ln();
    let mut scratch = vec![0.0f64; n];
    let mut logs = vec![0.0f64; comps.len()];
    let mut total = 0.0;
    let mut carry = 0.0;
    for p in points.iter() {
        let mut max_log = f64::NEG_INFINITY;
        for (m, c) in comps.iter().enumerate() {
            let l = c.log_weighted_density(p, &mut scratch);
            logs[m] = l;
            max_log = max_log.max(l);
        }
        let point_ll = if max_log < zero_log {
            f64::NEG_INFINITY
        } else {
            let sum: f64 = logs.iter().map(|l| (l - max_log).exp()).sum();
            max_log + sum.ln()
        };
        let y = point_ll - carry;
        let t = total + y;
        carry = (t - total) - y;
        total = t;
    }
    Ok(total)
}
