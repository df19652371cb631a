//! Uniform spatial and temporal grids with trapezoid quadrature.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::numerics::log_sum_exp;

/// Uniform grid on `[x_min, x_max]` including both end points.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    x_min: f64,
    x_max: f64,
    n_points: usize,
}

impl SpatialGrid {
    pub const MIN_POINTS: usize = 16;

    pub fn new(x_min: f64, x_max: f64, n_points: usize) -> Result<Self> {
        if !x_min.is_finite() || !x_max.is_finite() {
            return Err(Error::InvalidGrid(format!("non-finite bounds [{x_min}, {x_max}]")));
        }
        if x_min >= x_max {
            return Err(Error::InvalidGrid(format!("x_min {x_min} must be below x_max {x_max}")));
        }
        if n_points < Self::MIN_POINTS {
            return Err(Error::InvalidGrid(format!(
                "need at least {} points, got {n_points}",
                Self::MIN_POINTS
            )));
        }
        Ok(Self { x_min, x_max, n_points })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_points - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        debug_assert!(i < self.n_points);
        if i + 1 == self.n_points {
            return self.x_max;
        }
        self.x_min + (self.x_max - self.x_min) * (i as f64) / (self.n_points - 1) as f64
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.point(i)).collect()
    }

    /// Trapezoid weight of node `i`.
    pub fn weight(&self, i: usize) -> f64 {
        let h = self.spacing();
        if i == 0 || i + 1 == self.n_points {
            0.5 * h
        } else {
            h
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.weight(i)).collect()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.weight(i).ln()).collect()
    }

    pub fn integrate(&self, f: &[f64]) -> f64 {
        debug_assert_eq!(f.len(), self.n_points);
        f.iter().enumerate().map(|(i, v)| v * self.weight(i)).sum()
    }

    /// `log(integral exp(log_f))` under trapezoid quadrature.
    pub fn log_integrate(&self, log_f: &[f64]) -> f64 {
        debug_assert_eq!(log_f.len(), self.n_points);
        log_sum_exp(log_f.iter().enumerate().map(|(i, v)| v + self.weight(i).ln()))
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min && x <= self.x_max
    }

    /// Cell index and fractional offset of `x`, clamped to the grid.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let h = self.spacing();
        let pos = ((x - self.x_min) / h).clamp(0.0, (self.n_points - 1) as f64);
        self.split(pos)
    }

    /// Fractional index of `x` (unclamped).
    pub fn fractional_index(&self, x: f64) -> f64 {
        (x - self.x_min) / self.spacing()
    }

    fn split(&self, pos: f64) -> (usize, f64) {
        let max_cell = self.n_points - 2;
        let cell = (pos as usize).min(max_cell);
        (cell, pos - cell as f64)
    }

    pub fn nearest(&self, x: f64) -> usize {
        let (i, f) = self.locate(x);
        if f > 0.5 {
            i + 1
        } else {
            i
        }
    }

    /// Linear interpolation of nodal values, constant beyond the ends.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let (i, f) = self.locate(x);
        values[i] + f * (values[i + 1] - values[i])
    }

    /// Every second node; requires an odd number of points.
    pub fn coarsened(&self) -> Result<Self> {
        if self.n_points.is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!(
                "cannot coarsen {} points by two",
                self.n_points
            )));
        }
        Self::new(self.x_min, self.x_max, self.n_points.div_ceil(2))
    }

    /// Halve the spacing over the same interval.
    pub fn refined(&self) -> Self {
        Self {
            x_min: self.x_min,
            x_max: self.x_max,
            n_points: 2 * self.n_points - 1,
        }
    }

    /// Sub-grid made of nodes `first..=last`.
    pub fn subgrid(&self, first: usize, last: usize) -> Result<Self> {
        if last >= self.n_points || first >= last {
            return Err(Error::InvalidGrid(format!(
                "bad sub-range {first}..={last} of {} nodes",
                self.n_points
            )));
        }
        Self::new(self.point(first), self.point(last), last - first + 1)
    }
}

/// Uniform time grid `t_start = s < ... < t_end = u` with `n_steps` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "non-finite time interval [{t_start}, {t_end}]"
            )));
        }
        if t_start >= t_end {
            return Err(Error::InvalidGrid(format!(
                "t_start {t_start} must be below t_end {t_end}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("need at least one time step".into()));
        }
        Ok(Self {
            t_start,
            t_end,
            n_steps,
        })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_slices(&self) -> usize {
        self.n_steps + 1
    }

    pub fn step(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        debug_assert!(k <= self.n_steps);
        if k == self.n_steps {
            return self.t_end;
        }
        self.t_start + (self.t_end - self.t_start) * (k as f64) / self.n_steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Step index and fractional offset of `t`, clamped to the interval.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let pos = ((t - self.t_start) / self.step()).clamp(0.0, self.n_steps as f64);
        let cell = (pos as usize).min(self.n_steps - 1);
        (cell, pos - cell as f64)
    }

    pub fn fractional_index(&self, t: f64) -> f64 {
        (t - self.t_start) / self.step()
    }

    /// Slice index of `t` if it sits on the grid (relative tolerance 1e-9).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let pos = self.fractional_index(t);
        let k = (pos + 0.5).floor();
        if k < 0.0 || k > self.n_steps as f64 {
            return None;
        }
        if (pos - k).abs() < 1e-9 {
            Some(k as usize)
        } else {
            None
        }
    }

    pub fn coarsened(&self) -> Result<Self> {
        if !self.n_steps.is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!(
                "cannot coarsen {} steps by two",
                self.n_steps
            )));
        }
        Self::new(self.t_start, self.t_end, self.n_steps / 2)
    }

    pub fn refined(&self) -> Self {
        Self {
            t_start: self.t_start,
            t_end: self.t_end,
            n_steps: 2 * self.n_steps,
        }
    }

    pub fn subgrid(&self, first: usize, last: usize) -> Result<Self> {
        if last > self.n_steps || first >= last {
            return Err(Error::InvalidGrid(format!(
                "bad sub-range {first}..={last} of {} slices",
                self.n_slices()
            )));
        }
        Self::new(self.time(first), self.time(last), last - first)
    }
}
