//! Scalar potentials `V(x)` and the deformation parameter.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::SpatialGrid;

#[derive(Debug, Clone, PartialEq)]
pub enum PotentialKind {
    Free,
    /// `V(x) = omega^2 x^2 / 2`.
    Harmonic {
        omega: f64,
    },
    /// Nodal samples, linearly interpolated and held constant beyond the ends.
    Tabulated {
        grid: SpatialGrid,
        values: Vec<f64>,
        slopes: Vec<f64>,
        curvatures: Vec<f64>,
    },
}

/// A time-independent potential, bounded below.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    kind: PotentialKind,
}

impl Potential {
    pub fn free() -> Self {
        Self {
            kind: PotentialKind::Free,
        }
    }

    pub fn harmonic(omega: f64) -> Result<Self> {
        if !(omega.is_finite() && omega > 0.0) {
            return Err(Error::InvalidPotential(format!(
                "harmonic frequency must be positive, got {omega}"
            )));
        }
        Ok(Self {
            kind: PotentialKind::Harmonic { omega },
        })
    }

    /// Tabulated potential from nodal values on `grid`.
    ///
    /// Slopes and curvatures are taken by second-order differences at the
    /// nodes and interpolated linearly in between.
    pub fn tabulated(grid: &SpatialGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.len(),
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidPotential(format!("non-finite sample at node {i}")));
        }
        let h = grid.spacing();
        let slopes = crate::field::first_derivative(&values, h);
        let curvatures = crate::field::second_derivative(&values, h);
        Ok(Self {
            kind: PotentialKind::Tabulated {
                grid: grid.clone(),
                values,
                slopes,
                curvatures,
            },
        })
    }

    /// Samples `f` on `grid` into a tabulated potential.
    pub fn from_fn(grid: &SpatialGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::tabulated(grid, grid.points().into_iter().map(f).collect())
    }

    pub fn kind(&self) -> &PotentialKind {
        &self.kind
    }

    pub fn is_free(&self) -> bool {
        matches!(self.kind, PotentialKind::Free)
    }

    pub fn harmonic_frequency(&self) -> Option<f64> {
        match self.kind {
            PotentialKind::Harmonic { omega } => Some(omega),
            _ => None,
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match &self.kind {
            PotentialKind::Free => 0.0,
            PotentialKind::Harmonic { omega } => 0.5 * omega * omega * x * x,
            PotentialKind::Tabulated { grid, values, .. } => grid.interpolate(values, x),
        }
    }

    pub fn gradient(&self, x: f64) -> f64 {
        match &self.kind {
            PotentialKind::Free => 0.0,
            PotentialKind::Harmonic { omega } => omega * omega * x,
            PotentialKind::Tabulated { grid, slopes, .. } => grid.interpolate(slopes, x),
        }
    }

    pub fn curvature(&self, x: f64) -> f64 {
        match &self.kind {
            PotentialKind::Free => 0.0,
            PotentialKind::Harmonic { omega } => omega * omega,
            PotentialKind::Tabulated { grid, curvatures, .. } => grid.interpolate(curvatures, x),
        }
    }

    pub fn sample(&self, grid: &SpatialGrid) -> Vec<f64> {
        grid.points().into_iter().map(|x| self.value(x)).collect()
    }

    pub fn max_on(&self, grid: &SpatialGrid) -> f64 {
        self.sample(grid).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Lower bound of `V` over the grid nodes.
    pub fn lower_bound(&self, grid: &SpatialGrid) -> f64 {
        self.sample(grid).into_iter().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quadrature {
    #[default]
    Trapezoid,
}

/// Deformation parameter `hbar` plus the quadrature rule used everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationConfig {
    pub hbar: f64,
    pub quadrature: Quadrature,
}

impl DeformationConfig {
    pub fn new(hbar: f64) -> Result<Self> {
        if !(hbar.is_finite() && hbar > 0.0) {
            return Err(Error::Domain(format!("hbar must be positive, got {hbar}")));
        }
        Ok(Self {
            hbar,
            quadrature: Quadrature::Trapezoid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_derivatives() {
        let v = Potential::harmonic(2.0).unwrap();
        assert_eq!(v.value(1.5), 4.5);
        assert_eq!(v.gradient(1.5), 6.0);
        assert_eq!(v.curvature(-3.0), 4.0);
        assert!(Potential::harmonic(0.0).is_err());
        assert!(Potential::harmonic(-1.0).is_err());
    }

    #[test]
    fn tabulated_quartic_is_second_order() {
        let grid = SpatialGrid::new(-2.0, 2.0, 201).unwrap();
        let v = Potential::from_fn(&grid, |x| 0.25 * x.powi(4)).unwrap();
        let x = grid.point(130);
        assert!((v.gradient(x) - x.powi(3)).abs() < 1e-3);
        assert!((v.curvature(x) - 3.0 * x * x).abs() < 1e-3);
        assert!((v.value(x) - 0.25 * x.powi(4)).abs() < 1e-14);
        assert_eq!(v.lower_bound(&grid), 0.0);
    }

    #[test]
    fn rejects_bad_tables_and_hbar() {
        let grid = SpatialGrid::new(0.0, 1.0, 16).unwrap();
        assert!(Potential::tabulated(&grid, alloc::vec![0.0; 15]).is_err());
        let mut vals = alloc::vec![0.0; 16];
        vals[3] = f64::NAN;
        assert!(Potential::tabulated(&grid, vals).is_err());
        assert!(DeformationConfig::new(0.0).is_err());
        assert!(DeformationConfig::new(f64::INFINITY).is_err());
    }
}
