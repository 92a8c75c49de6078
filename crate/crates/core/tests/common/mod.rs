//! Shared fixtures: the three benchmark mixtures and their grids.
#![allow(dead_code)]

use gmmdec::grid::Grid;
use gmmdec::mixture::{GaussianComponent, Gmm};
use nalgebra::{DMatrix, DVector};

/// 1D benchmark: six atoms, a dominant wide one at the origin flanked by
/// unit-variance satellites and two isolated outer atoms at ±8.
pub fn line_mixture() -> Gmm {
    let atoms: [(f64, f64, f64); 6] = [
        (1.0, 0.0, 1.0),
        (8.0, 0.0, 4.0),
        (1.0, -2.0, 1.0),
        (1.0, 2.0, 1.0),
        (1.0, -8.0, 1.0),
        (1.0, 8.0, 1.0),
    ];
    Gmm::new(
        atoms
            .iter()
            .map(|(a, m, var)| GaussianComponent::spherical(*a, &[*m], var.sqrt()).unwrap())
            .collect(),
    )
    .unwrap()
}

pub fn line_grid() -> Grid {
    Grid::uniform(&[-10.0], &[0.02], &[1001]).unwrap()
}

/// 2D benchmark: three strongly anisotropic "legs" radiating from the
/// center plus one faint spherical atom overlapping the lower leg.
pub fn legs_mixture() -> Gmm {
    Gmm::new(vec![
        GaussianComponent::from_covariance(
            2.0,
            DVector::from_column_slice(&[-1.5, -2.5981]),
            DMatrix::from_row_slice(2, 2, &[0.7969, 1.272, 1.272, 2.2656]),
        )
        .unwrap(),
        GaussianComponent::from_covariance(
            2.0,
            DVector::from_column_slice(&[-1.5, 2.5981]),
            DMatrix::from_row_slice(2, 2, &[0.7969, -1.272, -1.272, 2.2656]),
        )
        .unwrap(),
        GaussianComponent::from_covariance(
            2.0,
            DVector::from_column_slice(&[3.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.0625]),
        )
        .unwrap(),
        GaussianComponent::spherical(1.0, &[-1.75, -3.0311], 1.0).unwrap(),
    ])
    .unwrap()
}

/// 2D benchmark: a ring of four unit atoms around the origin plus four
/// corner atoms of varying weight.
pub fn ring_mixture() -> Gmm {
    let atoms: [(f64, [f64; 2]); 8] = [
        (5.0, [-5.0, 5.0]),
        (1.0, [5.0, -5.0]),
        (3.0, [5.0, 5.0]),
        (4.0, [-5.0, -5.0]),
        (5.0, [-2.0, 0.0]),
        (5.0, [0.0, -2.0]),
        (5.0, [2.0, 0.0]),
        (5.0, [0.0, 2.0]),
    ];
    Gmm::new(
        atoms.iter()
            .map(|(a, m)| GaussianComponent::spherical(*a, m, 1.0).unwrap())
            .collect(),
    )
    .unwrap()
}

pub fn square_grid() -> Grid {
    let s = 20.0 / 65.0;
    Grid::uniform(&[-10.0, -10.0], &[s, s], &[65, 65]).unwrap()
}

/// Greedy nearest-mean matching with a uniqueness guarantee; panics if two
/// recovered components claim the same truth component.
pub fn match_components<'a>(
    truth: &'a Gmm,
    recovered: &'a Gmm,
) -> Vec<(&'a GaussianComponent, &'a GaussianComponent)> {
    let mut used = vec![false; truth.len()];
    let mut pairs = Vec::with_capacity(recovered.len());
    for c in recovered.components() {
        let (ti, _) = truth
            .components()
            .iter()
            .enumerate()
            .map(|(i, t)| (i, (t.mean() - c.mean()).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("truth mixture is non-empty");
        assert!(
            !used[ti],
            "two recovered components matched the same truth component"
        );
        used[ti] = true;
        pairs.push((&truth.components()[ti], c));
    }
    pairs
}

pub fn max_abs_entry(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).fold(0.0, f64::max)
}
