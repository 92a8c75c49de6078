//! Parameter packing and a box-constrained limited-memory quasi-Newton
//! minimizer for the residual-fit objective.
//!
//! Components are packed per entry as `[a, x (n), L (n(n+1)/2)]` where `L`
//! is the lower Cholesky factor of the covariance `Σ²` with a floored
//! diagonal. Keeping the diagonal positive through plain box bounds means
//! every iterate corresponds to a valid SPD covariance.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, GmmError, Result};
use crate::eval::rasterize;
use crate::grid::{Grid, Signal};
use crate::linalg;
use crate::mixture::{GaussianComponent, Gmm};

/// Box bounds applied to packed component parameters.
#[derive(Debug, Clone)]
pub struct BoundsPolicy {
    /// Per-axis lower bounds for component means.
    pub mean_lower: Vec<f64>,
    /// Per-axis upper bounds for component means.
    pub mean_upper: Vec<f64>,
    /// Lower bound for the diagonal entries of the covariance Cholesky
    /// factor; atoms narrower than this are unresolvable on the grid.
    pub sigma_floor: f64,
    /// Magnitude bound for off-diagonal Cholesky entries.
    pub offdiag_bound: f64,
}

impl BoundsPolicy {
    /// Policy for fitting atoms to a signal on `grid`: means may roam the
    /// grid bounding box expanded by 10% of its extent per axis, the sigma
    /// floor is half the smallest spacing, and off-diagonal factor entries
    /// are bounded by the grid extent.
    pub fn for_grid(grid: &Grid) -> BoundsPolicy {
        let (lo, hi) = grid.bounding_box();
        let mut mean_lower = Vec::with_capacity(grid.dim());
        let mut mean_upper = Vec::with_capacity(grid.dim());
        for axis in 0..grid.dim() {
            let extent = hi[axis] - lo[axis];
            let margin = if extent > 0.0 {
                0.1 * extent
            } else {
                grid.spacing()[axis]
            };
            mean_lower.push(lo[axis] - margin);
            mean_upper.push(hi[axis] + margin);
        }
        let extent = grid.max_extent();
        let offdiag_bound = if extent > 0.0 {
            extent
        } else {
            grid.spacing().iter().cloned().fold(0.0, f64::max)
        };
        BoundsPolicy {
            mean_lower,
            mean_upper,
            sigma_floor: grid.min_spacing() / 2.0,
            offdiag_bound,
        }
    }

    /// Policy with no effective restrictions (tests and free-form fits).
    pub fn unbounded(dim: usize) -> BoundsPolicy {
        BoundsPolicy {
            mean_lower: vec![f64::NEG_INFINITY; dim],
            mean_upper: vec![f64::INFINITY; dim],
            sigma_floor: 1e-8,
            offdiag_bound: f64::INFINITY,
        }
    }
}

/// Number of packed entries per component in `n` dimensions.
pub fn entries_per_component(n: usize) -> usize {
    1 + n + n * (n + 1) / 2
}

/// A flat parameter vector with per-entry closed interval bounds.
#[derive(Debug, Clone)]
pub struct PackedParams {
    values: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    dim: Option<usize>,
}

impl PackedParams {
    /// Raw constructor for generic box-constrained problems.
    pub fn with_bounds(values: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Result<PackedParams> {
        if values.len() != lower.len() || values.len() != upper.len() {
            return invalid("values and bounds lengths disagree");
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return invalid("lower bound exceeds upper bound");
        }
        Ok(PackedParams {
            values,
            lower,
            upper,
            dim: None,
        })
    }

    /// Same bounds, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<PackedParams> {
        if values.len() != self.values.len() {
            return invalid("replacement values have the wrong length");
        }
        Ok(PackedParams {
            values,
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            dim: self.dim,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Component dimension when packed from a mixture.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn component_count(&self, n: usize) -> usize {
        self.values.len() / entries_per_component(n)
    }
}

/// Pack a mixture into a flat bounded vector: per component
/// `[a, x, lower-triangular L of Σ²]` with `Σ² = L·Lᵀ`.
pub fn pack(gmm: &Gmm, policy: &BoundsPolicy) -> Result<PackedParams> {
    let n = match gmm.dim() {
        Some(n) => n,
        None => return invalid("cannot pack an empty mixture"),
    };
    if policy.mean_lower.len() != n || policy.mean_upper.len() != n {
        return invalid("bounds policy dimension does not match the mixture");
    }
    let stride = entries_per_component(n);
    let mut values = Vec::with_capacity(gmm.len() * stride);
    let mut lower = Vec::with_capacity(gmm.len() * stride);
    let mut upper = Vec::with_capacity(gmm.len() * stride);
    for comp in gmm.iter() {
        let l = linalg::cholesky_lower(&comp.covariance()).map_err(|_| {
            GmmError::Internal("covariance of a valid component must factor".into())
        })?;
        values.push(comp.weight());
        lower.push(0.0);
        upper.push(f64::INFINITY);
        for j in 0..n {
            values.push(comp.mean()[j]);
            lower.push(policy.mean_lower[j]);
            upper.push(policy.mean_upper[j]);
        }
        for i in 0..n {
            for j in 0..=i {
                values.push(l[(i, j)]);
                if i == j {
                    lower.push(policy.sigma_floor);
                    upper.push(f64::INFINITY);
                } else {
                    lower.push(-policy.offdiag_bound);
                    upper.push(policy.offdiag_bound);
                }
            }
        }
    }
    Ok(PackedParams {
        values,
        lower,
        upper,
        dim: Some(n),
    })
}

/// Inverse of [`pack`]: rebuild components with `Σ` the symmetric PSD square
/// root of `L·Lᵀ`.
pub fn unpack(p: &PackedParams, n: usize) -> Result<Gmm> {
    if n == 0 {
        return invalid("dimension must be at least 1");
    }
    if let Some(dn) = p.dim {
        if dn != n {
            return invalid("packed dimension does not match the requested dimension");
        }
    }
    let stride = entries_per_component(n);
    if !p.values.len().is_multiple_of(stride) {
        return invalid("packed vector length is inconsistent with the dimension");
    }
    let mut components = Vec::with_capacity(p.values.len() / stride);
    for chunk in p.values.chunks_exact(stride) {
        let weight = chunk[0];
        let mean = DVector::from_column_slice(&chunk[1..1 + n]);
        let mut l = DMatrix::zeros(n, n);
        let mut idx = 1 + n;
        for i in 0..n {
            for j in 0..=i {
                l[(i, j)] = chunk[idx];
                idx += 1;
            }
        }
        let cov = &l * l.transpose();
        let sigma = linalg::spd_sqrt_floored(&cov, 0.0);
        components.push(GaussianComponent::new(weight, mean, sigma)?);
    }
    Gmm::new(components)
}

/// Discrete residual-fit objective `|target - frozen - Σ active|₂²` with its
/// exact analytic gradient in the packed parameters.
pub struct ResidualObjective {
    dim: usize,
    points: Vec<f64>,
    /// target minus the rasterized frozen components
    residual_base: Vec<f64>,
}

impl ResidualObjective {
    pub fn new(target: &Signal, frozen: &Gmm) -> ResidualObjective {
        let grid = target.grid();
        let n = grid.dim();
        let mut points = vec![0.0; grid.len() * n];
        for flat in 0..grid.len() {
            grid.write_point(flat, &mut points[flat * n..(flat + 1) * n]);
        }
        let residual_base = if frozen.is_empty() {
            target.values().to_vec()
        } else {
            let f = rasterize(frozen, grid);
            target
                .values()
                .iter()
                .zip(f.values())
                .map(|(t, f)| t - f)
                .collect()
        };
        ResidualObjective {
            dim: n,
            points,
            residual_base,
        }
    }

    /// Objective value and gradient with respect to every packed entry.
    pub fn eval(&self, values: &[f64]) -> (f64, Vec<f64>) {
        let n = self.dim;
        let stride = entries_per_component(n);
        assert_eq!(values.len() % stride, 0, "packed length mismatch");
        let m = values.len() / stride;
        let tri = n * (n + 1) / 2;
        let norm0 = (2.0 * PI).powf(-(n as f64) / 2.0);

        // Per-component views and normalizing constants.
        let mut c_norm = vec![0.0; m];
        for (k, chunk) in values.chunks_exact(stride).enumerate() {
            let mut det = 1.0;
            let l = &chunk[1 + n..];
            for i in 0..n {
                det *= l[i * (i + 1) / 2 + i];
            }
            c_norm[k] = norm0 / det;
        }

        let n_points = self.residual_base.len();
        let mut grad = vec![0.0; values.len()];
        let mut w = vec![0.0; n];
        let mut v = vec![0.0; n];
        // Per-point scratch: densities and direction vectors per component.
        let mut phi = vec![0.0; m];
        let mut ce = vec![0.0; m];
        let mut vs = vec![0.0; m * n];
        let mut ws = vec![0.0; m * n];
        let mut objective = 0.0;

        for pi in 0..n_points {
            let y = &self.points[pi * n..(pi + 1) * n];
            let mut model = 0.0;
            for k in 0..m {
                let chunk = &values[k * stride..(k + 1) * stride];
                let a = chunk[0];
                let mean = &chunk[1..1 + n];
                let l = &chunk[1 + n..1 + n + tri];
                // Forward solve L w = y - mean.
                let mut q = 0.0;
                for i in 0..n {
                    let row = &l[i * (i + 1) / 2..];
                    let mut acc = y[i] - mean[i];
                    for j in 0..i {
                        acc -= row[j] * w[j];
                    }
                    let wi = acc / row[i];
                    w[i] = wi;
                    q += wi * wi;
                }
                // Back solve Lᵀ v = w.
                for i in (0..n).rev() {
                    let mut acc = w[i];
                    for j in (i + 1)..n {
                        acc -= l[j * (j + 1) / 2 + i] * v[j];
                    }
                    v[i] = acc / l[i * (i + 1) / 2 + i];
                }
                let cek = c_norm[k] * (-0.5 * q).exp();
                let phik = a * cek;
                model += phik;
                phi[k] = phik;
                ce[k] = cek;
                vs[k * n..k * n + n].copy_from_slice(&v);
                ws[k * n..k * n + n].copy_from_slice(&w);
            }
            let r = self.residual_base[pi] - model;
            objective += r * r;
            let coef = -2.0 * r;
            for k in 0..m {
                let g = &mut grad[k * stride..(k + 1) * stride];
                let lvals = &values[k * stride + 1 + n..(k + 1) * stride];
                let vk = &vs[k * n..k * n + n];
                let wk = &ws[k * n..k * n + n];
                g[0] += coef * ce[k];
                for j in 0..n {
                    g[1 + j] += coef * phi[k] * vk[j];
                }
                let mut idx = 1 + n;
                for i in 0..n {
                    for (j, &wkj) in wk.iter().enumerate().take(i + 1) {
                        let mut term = vk[i] * wkj;
                        if i == j {
                            term -= 1.0 / lvals[i * (i + 1) / 2 + i];
                        }
                        g[idx] += coef * phi[k] * term;
                        idx += 1;
                    }
                }
            }
        }
        (objective, grad)
    }
}

/// One-shot evaluation of the residual objective and its packed gradient.
pub fn objective_grad(target: &Signal, active: &PackedParams, frozen: &Gmm) -> (f64, Vec<f64>) {
    let obj = ResidualObjective::new(target, frozen);
    obj.eval(active.values())
}

/// Minimizer settings; the defaults make "run until convergence"
/// reproducible.
#[derive(Debug, Clone)]
pub struct SolveSettings {
    /// Stored correction pairs.
    pub memory: usize,
    /// Projected-gradient ∞-norm tolerance.
    pub gtol: f64,
    /// Relative objective-improvement tolerance.
    pub ftol: f64,
    /// Iteration cap per solve.
    pub max_iter: usize,
}

impl Default for SolveSettings {
    fn default() -> Self {
        SolveSettings {
            memory: 10,
            gtol: 1e-8,
            ftol: 1e-12,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIter,
    LineSearchFailure,
}

/// Outcome of a box-constrained solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    /// Projected-gradient ∞-norm at exit.
    pub projected_grad_norm: f64,
    pub status: SolveStatus,
    /// Objective at every accepted iterate, starting value included.
    pub objective_history: Vec<f64>,
    pub n_evals: usize,
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_LINE_SEARCH: usize = 25;
const MAX_ZOOM: usize = 30;

struct Lbfgsb<F> {
    obj: F,
    x: DVector<f64>,
    g: DVector<f64>,
    f: f64,
    l: DVector<f64>,
    u: DVector<f64>,
    s_store: VecDeque<DVector<f64>>,
    y_store: VecDeque<DVector<f64>>,
    theta: f64,
    w: DMatrix<f64>,
    m: DMatrix<f64>,
    n_evals: usize,
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Lbfgsb<F> {
    fn evaluate(&mut self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        self.n_evals += 1;
        let (f, g) = (self.obj)(x.as_slice());
        (f, DVector::from_vec(g))
    }

    fn projected_grad_inf_norm(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.x.len() {
            let step = (self.x[i] - self.g[i]).clamp(self.l[i], self.u[i]) - self.x[i];
            worst = worst.max(step.abs());
        }
        worst
    }

    fn clear_memory(&mut self) {
        self.s_store.clear();
        self.y_store.clear();
        self.theta = 1.0;
        self.w = DMatrix::zeros(self.x.len(), 0);
        self.m = DMatrix::zeros(0, 0);
    }

    /// Rebuild the compact representation `B = θI - W M Wᵀ` from the stored
    /// correction pairs. Returns false when the middle matrix is singular.
    fn rebuild_compact(&mut self) -> bool {
        let mem = self.s_store.len();
        let n = self.x.len();
        let s_mat = DMatrix::from_fn(n, mem, |i, j| self.s_store[j][i]);
        let y_mat = DMatrix::from_fn(n, mem, |i, j| self.y_store[j][i]);
        let mut w = DMatrix::zeros(n, 2 * mem);
        w.view_mut((0, 0), (n, mem)).copy_from(&y_mat);
        w.view_mut((0, mem), (n, mem))
            .copy_from(&(&s_mat * self.theta));
        let s_tr_y = s_mat.transpose() * &y_mat;
        let mut m_inv = DMatrix::zeros(2 * mem, 2 * mem);
        for i in 0..mem {
            m_inv[(i, i)] = -s_tr_y[(i, i)];
        }
        for i in 0..mem {
            for j in 0..i {
                m_inv[(mem + i, j)] = s_tr_y[(i, j)];
                m_inv[(j, mem + i)] = s_tr_y[(i, j)];
            }
        }
        let sts = (s_mat.transpose() * &s_mat) * self.theta;
        m_inv.view_mut((mem, mem), (mem, mem)).copy_from(&sts);
        match m_inv.try_inverse() {
            Some(inv) => {
                self.w = w;
                self.m = inv;
                true
            }
            None => false,
        }
    }

    /// Generalized Cauchy point along the projected steepest-descent path,
    /// and `c = Wᵀ(x_cp - x)` for the subspace step.
    fn cauchy_point(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.x.len();
        let twom = self.w.ncols();
        let mut t = vec![f64::INFINITY; n];
        let mut d = DVector::zeros(n);
        for i in 0..n {
            let gi = self.g[i];
            if gi < 0.0 {
                t[i] = (self.x[i] - self.u[i]) / gi;
            } else if gi > 0.0 {
                t[i] = (self.x[i] - self.l[i]) / gi;
            }
            if t[i] > 0.0 {
                d[i] = -gi;
            }
        }
        let mut x_cp = self.x.clone();
        let mut c = DVector::zeros(twom);
        if d.iter().all(|&v| v == 0.0) {
            return (x_cp, c);
        }
        let mut breakpoints: Vec<usize> =
            (0..n).filter(|&i| t[i].is_finite() && t[i] > 0.0).collect();
        breakpoints.sort_unstable_by(|&a, &b| t[a].total_cmp(&t[b]).then(a.cmp(&b)));

        let mut p = self.w.transpose() * &d;
        let mut fp = -d.dot(&d);
        let mut fpp = -self.theta * fp - p.dot(&(&self.m * &p));
        let mut dt_min = if fpp > 0.0 { -fp / fpp } else { f64::INFINITY };
        let mut t_old = 0.0;

        let mut iter = breakpoints.into_iter().peekable();
        while let Some(&b) = iter.peek() {
            let t_b = t[b];
            let dt_b = t_b - t_old;
            if dt_min < dt_b {
                break;
            }
            iter.next();
            // Fix coordinate b at its bound.
            x_cp[b] = if d[b] > 0.0 { self.u[b] } else { self.l[b] };
            let z_b = x_cp[b] - self.x[b];
            let g_b = self.g[b];
            c.axpy(dt_b, &p, 1.0);
            let w_b = self.w.row(b).transpose();
            let m_c = &self.m * &c;
            let m_p = &self.m * &p;
            let m_wb = &self.m * &w_b;
            fp += dt_b * fpp + g_b * g_b + self.theta * g_b * z_b - g_b * w_b.dot(&m_c);
            fpp -= self.theta * g_b * g_b + 2.0 * g_b * w_b.dot(&m_p) + g_b * g_b * w_b.dot(&m_wb);
            p.axpy(g_b, &w_b, 1.0);
            d[b] = 0.0;
            t_old = t_b;
            if fp >= 0.0 {
                dt_min = 0.0;
                break;
            }
            dt_min = if fpp > 0.0 { -fp / fpp } else { f64::INFINITY };
        }
        let dt_min = if dt_min.is_finite() {
            dt_min.max(0.0)
        } else {
            0.0
        };
        let t_free = t_old + dt_min;
        for i in 0..n {
            if d[i] != 0.0 {
                x_cp[i] = (self.x[i] + t_free * d[i]).clamp(self.l[i], self.u[i]);
            }
        }
        c.axpy(dt_min, &p, 1.0);
        (x_cp, c)
    }

    /// Minimize the quadratic model over the variables free at the Cauchy
    /// point (direct primal method), staying inside the box.
    fn subspace_step(&self, x_cp: &DVector<f64>, c: &DVector<f64>) -> DVector<f64> {
        let free: Vec<usize> = (0..self.x.len())
            .filter(|&i| x_cp[i] > self.l[i] && x_cp[i] < self.u[i])
            .collect();
        if free.is_empty() {
            return x_cp.clone();
        }
        let t = free.len();
        // Reduced gradient of the model at the Cauchy point.
        let full = &self.g + (x_cp - &self.x) * self.theta - &self.w * (&self.m * c);
        let r_hat = DVector::from_fn(t, |i, _| full[free[i]]);
        let d_hat = if self.w.ncols() == 0 {
            -&r_hat / self.theta
        } else {
            let w_free = DMatrix::from_fn(self.w.ncols(), t, |r, i| self.w[(free[i], r)]);
            let k = self.w.ncols();
            let n_mat =
                DMatrix::identity(k, k) - (&self.m * (&w_free * w_free.transpose())) / self.theta;
            let rhs = &self.m * (&w_free * &r_hat);
            match n_mat.lu().solve(&rhs) {
                Some(v) => -(&r_hat + (w_free.transpose() * v) / self.theta) / self.theta,
                None => -&r_hat / self.theta,
            }
        };
        // Longest feasible fraction of the subspace step.
        let mut alpha: f64 = 1.0;
        for (i, &fi) in free.iter().enumerate() {
            let di = d_hat[i];
            if di > 0.0 {
                alpha = alpha.min((self.u[fi] - x_cp[fi]) / di);
            } else if di < 0.0 {
                alpha = alpha.min((self.l[fi] - x_cp[fi]) / di);
            }
        }
        let mut x_bar = x_cp.clone();
        for (i, &fi) in free.iter().enumerate() {
            x_bar[fi] = (x_bar[fi] + alpha * d_hat[i]).clamp(self.l[fi], self.u[fi]);
        }
        x_bar
    }

    fn max_feasible_step(&self, d: &DVector<f64>) -> f64 {
        let mut a_max = 1e10f64;
        for i in 0..d.len() {
            if d[i] > 0.0 {
                a_max = a_max.min((self.u[i] - self.x[i]) / d[i]);
            } else if d[i] < 0.0 {
                a_max = a_max.min((self.l[i] - self.x[i]) / d[i]);
            }
        }
        a_max.max(0.0)
    }

    /// Strong-Wolfe line search along `d`. Returns the accepted step and its
    /// evaluation, or `None` when no acceptable step exists.
    fn line_search(
        &mut self,
        d: &DVector<f64>,
        dphi0: f64,
        alpha_max: f64,
    ) -> Option<(f64, f64, DVector<f64>)> {
        let f0 = self.f;
        let x0 = self.x.clone();
        let eval_at = |s: &mut Self, alpha: f64| {
            let xt = &x0 + d * alpha;
            let (f, g) = s.evaluate(&xt);
            let dphi = g.dot(d);
            (f, g, dphi)
        };
        let mut alpha_prev = 0.0;
        let mut phi_prev = f0;
        let mut dphi_prev = dphi0;
        let mut alpha = 1.0f64.min(alpha_max);
        if alpha <= 0.0 {
            return None;
        }
        for it in 0..MAX_LINE_SEARCH {
            let (phi, g, dphi) = eval_at(self, alpha);
            if phi > f0 + WOLFE_C1 * alpha * dphi0 || (it > 0 && phi >= phi_prev) {
                return self.zoom(d, f0, dphi0, alpha_prev, phi_prev, dphi_prev, alpha, phi);
            }
            if dphi.abs() <= -WOLFE_C2 * dphi0 {
                return Some((alpha, phi, g));
            }
            if dphi >= 0.0 {
                return self.zoom(d, f0, dphi0, alpha, phi, dphi, alpha_prev, phi_prev);
            }
            if alpha >= alpha_max * (1.0 - 1e-12) {
                // The step is capped by a bound; Armijo decrease held.
                return Some((alpha, phi, g));
            }
            alpha_prev = alpha;
            phi_prev = phi;
            dphi_prev = dphi;
            alpha = (2.0 * alpha).min(alpha_max);
        }
        None
    }

    /// Sectioning phase: `lo` always satisfies the sufficient-decrease
    /// condition; the minimizer is bracketed between `lo` and `hi`.
    #[allow(clippy::too_many_arguments)]
    fn zoom(
        &mut self,
        d: &DVector<f64>,
        f0: f64,
        dphi0: f64,
        mut alpha_lo: f64,
        mut phi_lo: f64,
        mut dphi_lo: f64,
        mut alpha_hi: f64,
        mut phi_hi: f64,
    ) -> Option<(f64, f64, DVector<f64>)> {
        let x0 = self.x.clone();
        for _ in 0..MAX_ZOOM {
            if (alpha_hi - alpha_lo).abs() < 1e-14 * alpha_lo.abs().max(1.0) {
                break;
            }
            // Quadratic interpolation using phi_lo, dphi_lo, phi_hi with a
            // safeguarded bisection fallback.
            let dalpha = alpha_hi - alpha_lo;
            let denom = 2.0 * (phi_hi - phi_lo - dphi_lo * dalpha);
            let mut alpha = if denom.abs() > 0.0 {
                alpha_lo - dphi_lo * dalpha * dalpha / denom
            } else {
                alpha_lo + 0.5 * dalpha
            };
            let lo = alpha_lo.min(alpha_hi);
            let hi = alpha_lo.max(alpha_hi);
            let pad = 0.1 * (hi - lo);
            if !(alpha > lo + pad && alpha < hi - pad) {
                alpha = alpha_lo + 0.5 * dalpha;
            }
            let xt = &x0 + d * alpha;
            let (phi, g) = self.evaluate(&xt);
            let dphi = g.dot(d);
            if phi > f0 + WOLFE_C1 * alpha * dphi0 || phi >= phi_lo {
                alpha_hi = alpha;
                phi_hi = phi;
            } else {
                if dphi.abs() <= -WOLFE_C2 * dphi0 {
                    return Some((alpha, phi, g));
                }
                if dphi * (alpha_hi - alpha_lo) >= 0.0 {
                    alpha_hi = alpha_lo;
                    phi_hi = phi_lo;
                }
                alpha_lo = alpha;
                phi_lo = phi;
                dphi_lo = dphi;
            }
        }
        // Interval collapsed: settle for plain decrease at lo when it exists.
        if phi_lo < f0 && alpha_lo > 0.0 {
            let xt = &x0 + d * alpha_lo;
            let (phi, g) = self.evaluate(&xt);
            return Some((alpha_lo, phi, g));
        }
        None
    }
}

/// Limited-memory quasi-Newton minimization with box projection.
///
/// The objective callback returns the value and dense gradient. Accepted
/// iterates are monotone non-increasing in the objective; the solve stops
/// when the projected-gradient ∞-norm drops below `gtol`, when the relative
/// objective improvement falls below `ftol`, or at `max_iter`.
pub fn minimize_box<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(
    obj: F,
    p0: &PackedParams,
    settings: &SolveSettings,
) -> (PackedParams, SolveReport) {
    let n = p0.len();
    let l = DVector::from_column_slice(p0.lower());
    let u = DVector::from_column_slice(p0.upper());
    let mut x = DVector::from_column_slice(p0.values());
    for i in 0..n {
        x[i] = x[i].clamp(l[i], u[i]);
    }
    let mut solver = Lbfgsb {
        obj,
        x,
        g: DVector::zeros(n),
        f: f64::INFINITY,
        l,
        u,
        s_store: VecDeque::new(),
        y_store: VecDeque::new(),
        theta: 1.0,
        w: DMatrix::zeros(n, 0),
        m: DMatrix::zeros(0, 0),
        n_evals: 0,
    };
    let x0 = solver.x.clone();
    let (f0, g0) = solver.evaluate(&x0);
    solver.f = f0;
    solver.g = g0;

    let mut history = vec![f0];
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;

    while iterations < settings.max_iter {
        iterations += 1;
        if solver.projected_grad_inf_norm() < settings.gtol {
            status = SolveStatus::Converged;
            break;
        }
        let (x_cp, c) = solver.cauchy_point();
        let x_bar = solver.subspace_step(&x_cp, &c);
        let d = &x_bar - &solver.x;
        let dphi0 = solver.g.dot(&d);
        if dphi0.is_nan() || dphi0 >= 0.0 {
            // Not a descent direction: distrust the curvature pairs once,
            // then give up if the plain projected-gradient model also fails.
            if !solver.s_store.is_empty() {
                solver.clear_memory();
                continue;
            }
            status = if d.norm() <= 1e-15 * solver.x.norm().max(1.0) {
                SolveStatus::Converged
            } else {
                SolveStatus::LineSearchFailure
            };
            break;
        }
        let alpha_max = solver.max_feasible_step(&d).max(1.0);
        match solver.line_search(&d, dphi0, alpha_max) {
            Some((alpha, f_new, g_new)) => {
                let mut x_new = &solver.x + &d * alpha;
                for i in 0..n {
                    x_new[i] = x_new[i].clamp(solver.l[i], solver.u[i]);
                }
                let s = &x_new - &solver.x;
                let y = &g_new - &solver.g;
                let sy = s.dot(&y);
                let yy = y.dot(&y);
                if sy > f64::EPSILON * yy && yy > 0.0 {
                    solver.s_store.push_back(s);
                    solver.y_store.push_back(y);
                    if solver.s_store.len() > settings.memory {
                        solver.s_store.pop_front();
                        solver.y_store.pop_front();
                    }
                    solver.theta = yy / sy;
                    if !solver.rebuild_compact() {
                        solver.clear_memory();
                    }
                }
                let f_old = solver.f;
                solver.x = x_new;
                solver.g = g_new;
                solver.f = f_new;
                history.push(f_new);
                if f_old - f_new <= settings.ftol * f_old.abs().max(f_new.abs()).max(1.0) {
                    status = SolveStatus::Converged;
                    break;
                }
            }
            None => {
                if !solver.s_store.is_empty() {
                    solver.clear_memory();
                    continue;
                }
                status = SolveStatus::LineSearchFailure;
                break;
            }
        }
    }

    let report = SolveReport {
        initial_objective: f0,
        final_objective: solver.f,
        iterations,
        projected_grad_norm: solver.projected_grad_inf_norm(),
        status,
        objective_history: history,
        n_evals: solver.n_evals,
    };
    let out = p0
        .with_values(solver.x.as_slice().to_vec())
        .expect("solver preserves the parameter length");
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unbounded_params(x0: &[f64]) -> PackedParams {
        PackedParams::with_bounds(
            x0.to_vec(),
            vec![f64::NEG_INFINITY; x0.len()],
            vec![f64::INFINITY; x0.len()],
        )
        .unwrap()
    }

    #[test]
    fn pack_examples() {
        // 1D: (a=2, x=0, Σ=3) packs to [2, 0, 3] since Σ² = 9 = 3·3.
        let c = GaussianComponent::spherical(2.0, &[0.0], 3.0).unwrap();
        let p = pack(&Gmm::from(c), &BoundsPolicy::unbounded(1)).unwrap();
        assert_eq!(p.values().len(), 3);
        assert_relative_eq!(p.values()[0], 2.0, epsilon = 1e-15);
        assert_relative_eq!(p.values()[1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(p.values()[2], 3.0, epsilon = 1e-12);

        // n=2 with identity covariance: L entries [1, 0, 1].
        let c = GaussianComponent::spherical(1.0, &[0.5, -0.5], 1.0).unwrap();
        let p = pack(&Gmm::from(c), &BoundsPolicy::unbounded(2)).unwrap();
        assert_eq!(p.values().len(), 6);
        assert_relative_eq!(p.values()[3], 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.values()[4], 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.values()[5], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pack_unpack_round_trip_preserves_parameters() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.7969, 1.272, 1.272, 2.2656]);
        let c = GaussianComponent::from_covariance(
            2.0,
            DVector::from_column_slice(&[-1.5, -2.5981]),
            cov.clone(),
        )
        .unwrap();
        let gmm = Gmm::from(c);
        let p = pack(&gmm, &BoundsPolicy::unbounded(2)).unwrap();
        let back = unpack(&p, 2).unwrap();
        let rc = &back.components()[0];
        assert_relative_eq!(rc.weight(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(rc.mean()[0], -1.5, epsilon = 1e-12);
        assert_relative_eq!(rc.covariance(), cov, epsilon = 1e-12);
        assert_relative_eq!(rc.sigma(), gmm.components()[0].sigma(), epsilon = 1e-12);

        // pack ∘ unpack is the identity on the flat vector.
        let p2 = pack(&back, &BoundsPolicy::unbounded(2)).unwrap();
        for (a, b) in p.values().iter().zip(p2.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn unpack_rejects_inconsistent_length() {
        let p = unbounded_params(&[1.0, 0.0, 1.0, 0.0]);
        assert!(unpack(&p, 1).is_err()); // stride 3 does not divide 4
        assert!(unpack(&p, 0).is_err());
    }

    #[test]
    fn quadratic_bowl_converges_without_bounds() {
        // (x-c)ᵀA(x-c) with SPD A.
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let c = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let obj = |x: &[f64]| {
            let xv = DVector::from_column_slice(x);
            let z = &xv - &c;
            let az = &a * &z;
            (z.dot(&az), (2.0 * az).as_slice().to_vec())
        };
        let p0 = unbounded_params(&[5.0, 5.0, 5.0]);
        let (sol, report) = minimize_box(obj, &p0, &SolveSettings::default());
        assert_eq!(report.status, SolveStatus::Converged);
        assert!(report.iterations <= 50, "iterations {}", report.iterations);
        for (i, v) in sol.values().iter().enumerate() {
            assert_relative_eq!(*v, c[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn active_bound_is_respected() {
        // (x+1)² with x ≥ 0 has its constrained minimum at 0.
        let obj = |x: &[f64]| {
            let v = x[0] + 1.0;
            (v * v, vec![2.0 * v])
        };
        let p0 = PackedParams::with_bounds(vec![3.0], vec![0.0], vec![f64::INFINITY]).unwrap();
        let (sol, report) = minimize_box(obj, &p0, &SolveSettings::default());
        assert_eq!(sol.values()[0], 0.0);
        assert!(matches!(
            report.status,
            SolveStatus::Converged | SolveStatus::LineSearchFailure
        ));
        assert!(report.final_objective <= report.initial_objective);
    }

    #[test]
    fn rosenbrock_in_a_box() {
        let obj = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            (f, g)
        };
        let p0 =
            PackedParams::with_bounds(vec![-1.5, 2.0], vec![-4.0, -4.0], vec![4.0, 4.0]).unwrap();
        let settings = SolveSettings {
            ftol: 1e-16,
            ..SolveSettings::default()
        };
        let (sol, report) = minimize_box(obj, &p0, &settings);
        assert_eq!(report.status, SolveStatus::Converged);
        assert_relative_eq!(sol.values()[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(sol.values()[1], 1.0, epsilon = 1e-5);
        // History is monotone non-increasing.
        for pair in report.objective_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
        // Feasibility of the result.
        for (i, v) in sol.values().iter().enumerate() {
            assert!(*v >= sol.lower()[i] && *v <= sol.upper()[i]);
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        use crate::grid::Grid;
        // Small 2D fit instance with one frozen and one active component.
        let grid = Grid::uniform(&[-3.0, -3.0], &[0.5, 0.5], &[13, 13]).unwrap();
        let truth = Gmm::new(vec![
            GaussianComponent::spherical(2.0, &[0.5, -0.3], 0.9).unwrap(),
            GaussianComponent::spherical(1.0, &[-1.0, 1.0], 0.7).unwrap(),
        ])
        .unwrap();
        let target = rasterize(&truth, &grid);
        let frozen = Gmm::from(GaussianComponent::spherical(0.5, &[1.0, 1.0], 1.0).unwrap());
        let active = Gmm::from(
            GaussianComponent::new(
                1.3,
                DVector::from_column_slice(&[0.2, 0.1]),
                DMatrix::from_row_slice(2, 2, &[1.1, 0.2, 0.2, 0.8]),
            )
            .unwrap(),
        );
        let p = pack(&active, &BoundsPolicy::unbounded(2)).unwrap();
        let objf = ResidualObjective::new(&target, &frozen);
        let (f, grad) = objf.eval(p.values());
        assert!(f > 0.0);
        for i in 0..p.len() {
            let h = 1e-6 * p.values()[i].abs().max(1.0);
            let mut vp = p.values().to_vec();
            vp[i] += h;
            let (fp, _) = objf.eval(&vp);
            vp[i] -= 2.0 * h;
            let (fm, _) = objf.eval(&vp);
            let fd = (fp - fm) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-8);
            assert!(
                ((grad[i] - fd) / denom).abs() < 1e-5,
                "entry {}: analytic {} vs fd {}",
                i,
                grad[i],
                fd
            );
        }

        // Frozen components shift the objective but not the gradient length.
        let frozen2 = Gmm::from(GaussianComponent::spherical(1.0, &[1.0, 1.0], 1.0).unwrap());
        let objf2 = ResidualObjective::new(&target, &frozen2);
        let (f2, grad2) = objf2.eval(p.values());
        assert_ne!(f, f2);
        assert_eq!(grad.len(), grad2.len());
    }

    #[test]
    fn perfect_fit_has_zero_objective_and_gradient() {
        let grid = Grid::uniform(&[-4.0], &[0.25], &[33]).unwrap();
        let truth = Gmm::from(GaussianComponent::spherical(2.0, &[0.3], 0.8).unwrap());
        let target = rasterize(&truth, &grid);
        let p = pack(&truth, &BoundsPolicy::unbounded(1)).unwrap();
        let (f, g) = objective_grad(&target, &p, &Gmm::empty());
        assert!(f < 1e-22, "objective {}", f);
        assert!(g.iter().all(|v| v.abs() < 1e-10));
    }
}
