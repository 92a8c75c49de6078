//! Uniform lattices, sampled signals and point clouds.
//!
//! A [`Grid`] is an axis-aligned uniform lattice in `n` dimensions. Samples
//! are stored flat in row-major order with the first axis slowest, so 2D
//! dumps read like the usual matrix layout.

use crate::error::{invalid, GmmError, Result};

/// Axis-aligned uniform lattice: `point(i_1..i_n) = origin + i ∘ spacing`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    origin: Vec<f64>,
    spacing: Vec<f64>,
    counts: Vec<usize>,
}

impl Grid {
    /// Build a uniform grid from per-axis origin, spacing and point counts.
    pub fn uniform(origin: &[f64], spacing: &[f64], counts: &[usize]) -> Result<Grid> {
        let n = origin.len();
        if n == 0 {
            return invalid("grid dimension must be at least 1");
        }
        if spacing.len() != n || counts.len() != n {
            return invalid(format!(
                "origin/spacing/counts lengths disagree: {}/{}/{}",
                n,
                spacing.len(),
                counts.len()
            ));
        }
        if spacing.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return invalid("grid spacing must be strictly positive and finite");
        }
        if counts.contains(&0) {
            return invalid("grid counts must be positive");
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return invalid("grid origin must be finite");
        }
        // Guard against overflow of the flat index space.
        let mut total: usize = 1;
        for &k in counts {
            total = total
                .checked_mul(k)
                .ok_or_else(|| GmmError::InvalidArgument("grid point count overflows".into()))?;
        }
        Ok(Grid {
            origin: origin.to_vec(),
            spacing: spacing.to_vec(),
            counts: counts.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    /// Total number of lattice points.
    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // counts are validated positive
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Row-major flat index of a multi-index (first axis slowest).
    pub fn flat_index(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.dim());
        let mut flat = 0;
        for (axis, &i) in multi.iter().enumerate() {
            debug_assert!(i < self.counts[axis]);
            flat = flat * self.counts[axis] + i;
        }
        flat
    }

    /// Multi-index of a flat index.
    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        debug_assert!(flat < self.len());
        let mut multi = vec![0usize; self.dim()];
        let mut rest = flat;
        for axis in (0..self.dim()).rev() {
            multi[axis] = rest % self.counts[axis];
            rest /= self.counts[axis];
        }
        multi
    }

    /// Coordinates of the lattice point with the given flat index.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.write_point(flat, &mut out);
        out
    }

    /// Write the coordinates of a lattice point into `out` without allocating.
    pub fn write_point(&self, flat: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        let mut rest = flat;
        for axis in (0..self.dim()).rev() {
            let i = rest % self.counts[axis];
            rest /= self.counts[axis];
            out[axis] = self.origin[axis] + i as f64 * self.spacing[axis];
        }
    }

    /// Squared Euclidean distance from `y` to the lattice point `flat`.
    fn dist_sq(&self, flat: usize, y: &[f64]) -> f64 {
        let mut rest = flat;
        let mut d2 = 0.0;
        for axis in (0..self.dim()).rev() {
            let i = rest % self.counts[axis];
            rest /= self.counts[axis];
            let c = self.origin[axis] + i as f64 * self.spacing[axis];
            let d = y[axis] - c;
            d2 += d * d;
        }
        d2
    }

    /// The `k` lattice points nearest to `y` in Euclidean distance.
    ///
    /// Exact exhaustive search; ties are broken by ascending flat index and
    /// the output is sorted by `(distance, flat index)`, so the result is
    /// deterministic.
    pub fn k_nearest(&self, y: &[f64], k: usize) -> Result<Vec<usize>> {
        if y.len() != self.dim() {
            return invalid("query point dimension mismatch");
        }
        let total = self.len();
        if k == 0 || k > total {
            return invalid(format!("k = {} out of range 1..={}", k, total));
        }
        let mut order: Vec<(f64, usize)> = (0..total).map(|i| (self.dist_sq(i, y), i)).collect();
        let cmp =
            |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1));
        if k < total {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(order.into_iter().map(|(_, i)| i).collect())
    }

    /// Flat index of the lattice point nearest to `y`, or `None` when `y`
    /// falls outside the grid bounding box expanded by half a cell per axis.
    ///
    /// Equivalent to `k_nearest(y, 1)` (including the tie-break toward the
    /// lower flat index) for in-range points, but O(n) instead of O(total).
    pub fn nearest_index(&self, y: &[f64]) -> Option<usize> {
        debug_assert_eq!(y.len(), self.dim());
        let mut flat = 0usize;
        for (axis, &coord) in y.iter().enumerate() {
            let t = (coord - self.origin[axis]) / self.spacing[axis];
            let top = (self.counts[axis] - 1) as f64;
            if t < -0.5 || t > top + 0.5 {
                return None;
            }
            // Half-way points round down so the lower flat index wins.
            let mut i = t.round();
            if (t - t.floor() - 0.5).abs() == 0.0 {
                i = t.floor();
            }
            let i = (i.max(0.0).min(top)) as usize;
            flat = flat * self.counts[axis] + i;
        }
        Some(flat)
    }

    /// Lower and upper corners of the lattice bounding box.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self.origin.clone();
        let hi = self
            .origin
            .iter()
            .zip(&self.spacing)
            .zip(&self.counts)
            .map(|((&o, &s), &k)| o + s * (k - 1) as f64)
            .collect();
        (lo, hi)
    }

    /// Smallest spacing over all axes.
    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Largest axis extent `(count - 1) * spacing`.
    pub fn max_extent(&self) -> f64 {
        self.spacing
            .iter()
            .zip(&self.counts)
            .map(|(&s, &k)| s * (k - 1) as f64)
            .fold(0.0, f64::max)
    }
}

/// Dense real-valued samples indexed by a [`Grid`], flat row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    grid: Grid,
    values: Vec<f64>,
}

impl Signal {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Signal> {
        if values.len() != grid.len() {
            return invalid(format!(
                "value count {} does not match grid point count {}",
                values.len(),
                grid.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("signal values must be finite");
        }
        Ok(Signal { grid, values })
    }

    pub fn zeros(grid: Grid) -> Signal {
        let n = grid.len();
        Signal {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Elementwise difference on a shared grid.
    pub fn sub(&self, other: &Signal) -> Result<Signal> {
        if self.grid != other.grid {
            return invalid("signals live on different grids");
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Signal::new(self.grid.clone(), values)
    }
}

/// A finite set of points in `ℝⁿ`, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
}

impl PointCloud {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<PointCloud> {
        if dim == 0 {
            return invalid("point cloud dimension must be at least 1");
        }
        if !coords.len().is_multiple_of(dim) {
            return invalid("coordinate buffer length is not a multiple of the dimension");
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return invalid("point coordinates must be finite");
        }
        Ok(PointCloud { dim, coords })
    }

    pub fn empty(dim: usize) -> PointCloud {
        PointCloud {
            dim,
            coords: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub(crate) fn push(&mut self, p: &[f64]) {
        debug_assert_eq!(p.len(), self.dim);
        self.coords.extend_from_slice(p);
    }
}
