//! Space-time fields on `TimeGrid x SpatialGrid`, their derivative jets and
//! residual fields.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::expr::{Bindings, Expr};
use crate::grid::{SpatialGrid, TimeGrid};
use crate::numerics::cubic_interpolate;

/// First derivative: central differences inside, second-order one-sided at
/// the ends.
pub fn first_derivative(f: &[f64], h: f64) -> Vec<f64> {
    (0..f.len()).map(|i| d1(f, i, h)).collect()
}

pub fn second_derivative(f: &[f64], h: f64) -> Vec<f64> {
    (0..f.len()).map(|i| d2(f, i, h)).collect()
}

#[inline]
fn d1(f: &[f64], i: usize, h: f64) -> f64 {
    let n = f.len();
    if n < 3 {
        return (f[n - 1] - f[0]) / h;
    }
    if i == 0 {
        (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * h)
    } else if i + 1 == n {
        (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * h)
    } else {
        (f[i + 1] - f[i - 1]) / (2.0 * h)
    }
}

#[inline]
fn d2(f: &[f64], i: usize, h: f64) -> f64 {
    let n = f.len();
    if i == 0 {
        (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) / (h * h)
    } else if i + 1 == n {
        (2.0 * f[n - 1] - 5.0 * f[n - 2] + 4.0 * f[n - 3] - f[n - 4]) / (h * h)
    } else {
        (f[i + 1] - 2.0 * f[i] + f[i - 1]) / (h * h)
    }
}

#[inline]
fn d3(f: &[f64], i: usize, h: f64) -> f64 {
    let n = f.len();
    let h3 = 2.0 * h * h * h;
    if i < 2 {
        (-5.0 * f[i] + 18.0 * f[i + 1] - 24.0 * f[i + 2] + 14.0 * f[i + 3] - 3.0 * f[i + 4]) / h3
    } else if i + 2 >= n {
        (5.0 * f[i] - 18.0 * f[i - 1] + 24.0 * f[i - 2] - 14.0 * f[i - 3] + 3.0 * f[i - 4]) / h3
    } else {
        (f[i + 2] - 2.0 * f[i + 1] + 2.0 * f[i - 1] - f[i - 2]) / h3
    }
}

/// Value and partial derivatives of a field at one node.
///
/// Derived fields that cannot supply a higher derivative set it to NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub dx: f64,
    pub dxx: f64,
    pub dxxx: f64,
    pub dt: f64,
    pub dxt: f64,
}

impl Jet {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            dx: 0.0,
            dxx: 0.0,
            dxxx: 0.0,
            dt: 0.0,
            dxt: 0.0,
        }
    }
}

/// A field whose derivatives can be queried node by node.
pub trait JetField {
    fn grid(&self) -> &SpatialGrid;
    fn tgrid(&self) -> &TimeGrid;
    fn jet(&self, i: usize, k: usize) -> Jet;

    /// Whether the jet at `(i, k)` is accurate enough to enter residual
    /// norms. Finite-difference fields exclude two nodes at each spatial
    /// end and the first and last time slice.
    fn is_valid(&self, i: usize, k: usize) -> bool {
        let n = self.grid().len();
        let m = self.tgrid().n_steps();
        i >= 2 && i + 2 < n && k >= 1 && k < m
    }
}

/// Dense field, `values[k * n_x + i]` at `(x_i, t_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    grid: SpatialGrid,
    tgrid: TimeGrid,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: SpatialGrid, tgrid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        let expected = grid.len() * tgrid.n_slices();
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                found: values.len(),
            });
        }
        Ok(Self { grid, tgrid, values })
    }

    pub fn from_fn(grid: &SpatialGrid, tgrid: &TimeGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let xs = grid.points();
        let mut values = Vec::with_capacity(xs.len() * tgrid.n_slices());
        for k in 0..tgrid.n_slices() {
            let t = tgrid.time(k);
            values.extend(xs.iter().map(|&x| f(x, t)));
        }
        Self {
            grid: grid.clone(),
            tgrid: tgrid.clone(),
            values,
        }
    }

    pub fn from_slices(grid: &SpatialGrid, tgrid: &TimeGrid, slices: Vec<Vec<f64>>) -> Result<Self> {
        if slices.len() != tgrid.n_slices() {
            return Err(Error::ShapeMismatch {
                expected: tgrid.n_slices(),
                found: slices.len(),
            });
        }
        let mut values = Vec::with_capacity(grid.len() * slices.len());
        for s in slices {
            if s.len() != grid.len() {
                return Err(Error::ShapeMismatch {
                    expected: grid.len(),
                    found: s.len(),
                });
            }
            values.extend(s);
        }
        Self::new(grid.clone(), tgrid.clone(), values)
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn tgrid(&self) -> &TimeGrid {
        &self.tgrid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[k * self.grid.len() + i]
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid.clone(),
            tgrid: self.tgrid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise combination of two fields on identical grids.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.grid != other.grid || self.tgrid != other.tgrid {
            return Err(Error::InvalidField("fields live on different grids".into()));
        }
        Ok(Self {
            grid: self.grid.clone(),
            tgrid: self.tgrid.clone(),
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Bilinear interpolation, clamped to the grid box.
    pub fn interpolate(&self, x: f64, t: f64) -> f64 {
        let (i, fx) = self.grid.locate(x);
        let (k, ft) = self.tgrid.locate(t);
        let v00 = self.get(i, k);
        let v10 = self.get(i + 1, k);
        let v01 = self.get(i, k + 1);
        let v11 = self.get(i + 1, k + 1);
        let lo = v00 + fx * (v10 - v00);
        let hi = v01 + fx * (v11 - v01);
        lo + ft * (hi - lo)
    }

    /// Cubic interpolation in `x` on time slice `k`.
    pub fn interpolate_in_slice(&self, x: f64, k: usize) -> f64 {
        let pos = self.grid.fractional_index(x);
        cubic_interpolate(self.slice(k), pos)
    }

    /// Spatial derivative of every slice.
    pub fn d_dx(&self) -> Self {
        let h = self.grid.spacing();
        let mut out = Vec::with_capacity(self.values.len());
        for k in 0..self.tgrid.n_slices() {
            out.extend(first_derivative(self.slice(k), h));
        }
        Self {
            grid: self.grid.clone(),
            tgrid: self.tgrid.clone(),
            values: out,
        }
    }

    pub fn sup_norm(&self) -> f64 {
        sup_abs(self.values.iter().copied())
    }

    /// Restriction to nodes `i0..=i1`, slices `k0..=k1`.
    pub fn sub_box(&self, i0: usize, i1: usize, k0: usize, k1: usize) -> Result<Self> {
        let grid = self.grid.subgrid(i0, i1)?;
        let tgrid = self.tgrid.subgrid(k0, k1)?;
        let mut values = Vec::with_capacity(grid.len() * tgrid.n_slices());
        for k in k0..=k1 {
            values.extend_from_slice(&self.slice(k)[i0..=i1]);
        }
        Self::new(grid, tgrid, values)
    }

    fn time_column(&self, i: usize) -> impl Fn(usize) -> f64 + '_ {
        move |k| self.get(i, k)
    }

    fn dx_at(&self, i: usize, k: usize) -> f64 {
        d1(self.slice(k), i, self.grid.spacing())
    }
}

fn time_derivative(f: impl Fn(usize) -> f64, k: usize, m: usize, dt: f64) -> f64 {
    if m == 1 {
        return (f(1) - f(0)) / dt;
    }
    if k == 0 {
        (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * dt)
    } else if k == m {
        (3.0 * f(m) - 4.0 * f(m - 1) + f(m - 2)) / (2.0 * dt)
    } else {
        (f(k + 1) - f(k - 1)) / (2.0 * dt)
    }
}

impl JetField for GridField {
    fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    fn tgrid(&self) -> &TimeGrid {
        &self.tgrid
    }

    fn jet(&self, i: usize, k: usize) -> Jet {
        let h = self.grid.spacing();
        let dt = self.tgrid.step();
        let m = self.tgrid.n_steps();
        let row = self.slice(k);
        Jet {
            value: row[i],
            dx: d1(row, i, h),
            dxx: d2(row, i, h),
            dxxx: d3(row, i, h),
            dt: time_derivative(self.time_column(i), k, m, dt),
            dxt: time_derivative(|kk| self.dx_at(i, kk), k, m, dt),
        }
    }
}

/// A closed-form field `f(x, t)` with symbolic derivatives.
#[derive(Debug, Clone)]
pub struct AnalyticField {
    grid: SpatialGrid,
    tgrid: TimeGrid,
    expr: Expr,
    dx: Expr,
    dxx: Expr,
    dxxx: Expr,
    dt: Expr,
    dxt: Expr,
    params: Bindings,
}

impl AnalyticField {
    /// `expr` may use `x`, `t` and any name bound in `params`.
    pub fn new(grid: &SpatialGrid, tgrid: &TimeGrid, expr: Expr, params: Bindings) -> Result<Self> {
        for name in expr.variables() {
            if name != "x" && name != "t" && params.get(&name).is_none() {
                return Err(Error::Expression(format!("unbound variable {name}")));
            }
        }
        let dx = expr.derivative("x");
        let dxx = dx.derivative("x");
        let dxxx = dxx.derivative("x");
        let dt = expr.derivative("t");
        let dxt = dx.derivative("t");
        Ok(Self {
            grid: grid.clone(),
            tgrid: tgrid.clone(),
            expr,
            dx,
            dxx,
            dxxx,
            dt,
            dxt,
            params,
        })
    }

    pub fn parse(grid: &SpatialGrid, tgrid: &TimeGrid, src: &str, params: Bindings) -> Result<Self> {
        Self::new(grid, tgrid, Expr::parse(src)?, params)
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    fn eval(&self, e: &Expr, x: f64, t: f64) -> f64 {
        e.eval_with(&|name| match name {
            "x" => Some(x),
            "t" => Some(t),
            other => self.params.get(other),
        })
        .unwrap_or(f64::NAN)
    }

    pub fn value_at(&self, x: f64, t: f64) -> f64 {
        self.eval(&self.expr, x, t)
    }

    pub fn jet_at(&self, x: f64, t: f64) -> Jet {
        Jet {
            value: self.eval(&self.expr, x, t),
            dx: self.eval(&self.dx, x, t),
            dxx: self.eval(&self.dxx, x, t),
            dxxx: self.eval(&self.dxxx, x, t),
            dt: self.eval(&self.dt, x, t),
            dxt: self.eval(&self.dxt, x, t),
        }
    }

    pub fn to_grid(&self) -> GridField {
        GridField::from_fn(&self.grid, &self.tgrid, |x, t| self.value_at(x, t))
    }
}

impl JetField for AnalyticField {
    fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    fn tgrid(&self) -> &TimeGrid {
        &self.tgrid
    }

    fn jet(&self, i: usize, k: usize) -> Jet {
        self.jet_at(self.grid.point(i), self.tgrid.time(k))
    }

    fn is_valid(&self, _i: usize, _k: usize) -> bool {
        true
    }
}

/// Axis-aligned box in `(x, t)` restricting residual norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub x_min: f64,
    pub x_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Window {
    pub fn everything() -> Self {
        Self {
            x_min: f64::NEG_INFINITY,
            x_max: f64::INFINITY,
            t_min: f64::NEG_INFINITY,
            t_max: f64::INFINITY,
        }
    }

    pub fn new(x_min: f64, x_max: f64, t_min: f64, t_max: f64) -> Self {
        Self {
            x_min,
            x_max,
            t_min,
            t_max,
        }
    }

    pub fn contains(&self, x: f64, t: f64) -> bool {
        const SLACK: f64 = 1e-12;
        x >= self.x_min - SLACK && x <= self.x_max + SLACK && t >= self.t_min - SLACK && t <= self.t_max + SLACK
    }
}

/// Pointwise residual with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualField {
    field: GridField,
    valid: Vec<bool>,
}

impl ResidualField {
    /// Evaluates `f` at every node valid for all of `sources`.
    pub fn build(sources: &[&dyn JetField], f: impl Fn(usize, usize) -> f64) -> Self {
        let grid = sources[0].grid().clone();
        let tgrid = sources[0].tgrid().clone();
        let n = grid.len();
        let slices = tgrid.n_slices();
        let mut values = vec![f64::NAN; n * slices];
        let mut valid = vec![false; n * slices];
        for k in 0..slices {
            for i in 0..n {
                if sources.iter().all(|s| s.is_valid(i, k)) {
                    values[k * n + i] = f(i, k);
                    valid[k * n + i] = true;
                }
            }
        }
        Self {
            field: GridField { grid, tgrid, values },
            valid,
        }
    }

    pub fn field(&self) -> &GridField {
        &self.field
    }

    pub fn is_valid(&self, i: usize, k: usize) -> bool {
        self.valid[k * self.field.grid.len() + i]
    }

    /// Largest absolute residual over valid nodes; infinite if any valid
    /// node is not finite.
    pub fn sup_norm(&self) -> f64 {
        self.sup_norm_in(&Window::everything())
    }

    pub fn sup_norm_in(&self, window: &Window) -> f64 {
        let n = self.field.grid.len();
        let xs = self.field.grid.points();
        let mut out = 0.0f64;
        for k in 0..self.field.tgrid.n_slices() {
            let t = self.field.tgrid.time(k);
            for (i, &x) in xs.iter().enumerate() {
                if !self.valid[k * n + i] || !window.contains(x, t) {
                    continue;
                }
                let v = self.field.values[k * n + i];
                if !v.is_finite() {
                    return f64::INFINITY;
                }
                out = out.max(v.abs());
            }
        }
        out
    }

    /// Combines two residuals on the same grids; validity is the
    /// intersection.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let field = self.field.zip_map(&other.field, f)?;
        let valid = self.valid.iter().zip(&other.valid).map(|(a, b)| *a && *b).collect();
        Ok(Self { field, valid })
    }
}

/// Implements [`JetField`] for a residual by finite differences of its
/// values, keeping its validity mask.
impl JetField for ResidualField {
    fn grid(&self) -> &SpatialGrid {
        &self.field.grid
    }

    fn tgrid(&self) -> &TimeGrid {
        &self.field.tgrid
    }

    fn jet(&self, i: usize, k: usize) -> Jet {
        self.field.jet(i, k)
    }

    fn is_valid(&self, i: usize, k: usize) -> bool {
        let n = self.field.grid.len();
        if i == 0 || i + 1 >= n {
            return false;
        }
        self.valid[k * n + i] && self.valid[k * n + i - 1] && self.valid[k * n + i + 1]
    }
}

/// Jets evaluated once per node, for fields composed from other fields.
#[derive(Debug, Clone, PartialEq)]
pub struct JetTable {
    grid: SpatialGrid,
    tgrid: TimeGrid,
    jets: Vec<Jet>,
    valid: Vec<bool>,
}

impl JetTable {
    /// Evaluates `f` at every node valid for all of `sources`.
    pub fn build(sources: &[&dyn JetField], f: impl Fn(usize, usize) -> Jet) -> Self {
        let grid = sources[0].grid().clone();
        let tgrid = sources[0].tgrid().clone();
        let n = grid.len();
        let nan = Jet {
            value: f64::NAN,
            dx: f64::NAN,
            dxx: f64::NAN,
            dxxx: f64::NAN,
            dt: f64::NAN,
            dxt: f64::NAN,
        };
        let mut jets = vec![nan; n * tgrid.n_slices()];
        let mut valid = vec![false; jets.len()];
        for k in 0..tgrid.n_slices() {
            for i in 0..n {
                if sources.iter().all(|s| s.is_valid(i, k)) {
                    jets[k * n + i] = f(i, k);
                    valid[k * n + i] = true;
                }
            }
        }
        Self {
            grid,
            tgrid,
            jets,
            valid,
        }
    }

    /// Values as a dense field; invalid nodes hold NaN.
    pub fn values(&self) -> GridField {
        GridField {
            grid: self.grid.clone(),
            tgrid: self.tgrid.clone(),
            values: self.jets.iter().map(|j| j.value).collect(),
        }
    }
}

impl JetField for JetTable {
    fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    fn tgrid(&self) -> &TimeGrid {
        &self.tgrid
    }

    fn jet(&self, i: usize, k: usize) -> Jet {
        self.jets[k * self.grid.len() + i]
    }

    fn is_valid(&self, i: usize, k: usize) -> bool {
        self.valid[k * self.grid.len() + i]
    }
}

/// Observed convergence order from residuals on a grid and its refinement
/// by two.
pub fn observed_order(coarse: f64, fine: f64) -> f64 {
    (coarse / fine).log2()
}

pub(crate) fn sup_abs(values: impl Iterator<Item = f64>) -> f64 {
    let mut out = 0.0f64;
    for v in values {
        if !v.is_finite() {
            return f64::INFINITY;
        }
        out = out.max(v.abs());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grids(n: usize, m: usize) -> (SpatialGrid, TimeGrid) {
        (
            SpatialGrid::new(-1.0, 1.0, n).unwrap(),
            TimeGrid::new(0.0, 1.0, m).unwrap(),
        )
    }

    #[test]
    fn stencils_are_exact_on_low_degree_polynomials() {
        let (g, _) = grids(21, 4);
        let f: Vec<f64> = g.points().iter().map(|x| x * x * x - 2.0 * x * x + x).collect();
        let q: Vec<f64> = g.points().iter().map(|x| x - 2.0 * x * x).collect();
        let h = g.spacing();
        for i in 0..21 {
            let x = g.point(i);
            assert!((d1(&q, i, h) - (1.0 - 4.0 * x)).abs() < 1e-9, "d1 at {i}");
            assert!((d2(&f, i, h) - (6.0 * x - 4.0)).abs() < 1e-8, "d2 at {i}");
            assert!((d3(&f, i, h) - 6.0).abs() < 1e-6, "d3 at {i}");
        }
    }

    #[test]
    fn grid_jets_converge_at_second_order() {
        let err = |n: usize, m: usize| {
            let (g, tg) = grids(n, m);
            let f = GridField::from_fn(&g, &tg, |x, t| (x + 0.3 * t).sin() * (-t).exp());
            let (i, k) = ((n - 1) / 4, m / 2);
            let (x, t) = (g.point(i), tg.time(k));
            let jet = f.jet(i, k);
            let e = (-t).exp();
            let exact_dxt = -(x + 0.3 * t).sin() * 0.3 * e - (x + 0.3 * t).cos() * e;
            (jet.dxt - exact_dxt).abs() + (jet.dxxx + (x + 0.3 * t).cos() * e).abs()
        };
        let order = observed_order(err(41, 16), err(81, 32));
        assert!(order > 1.8, "order {order}");
    }

    #[test]
    fn analytic_field_jets() {
        let (g, tg) = grids(16, 4);
        let f = AnalyticField::parse(&g, &tg, "a*x^3*t", Bindings::new().with("a", 2.0)).unwrap();
        let j = f.jet_at(0.5, 2.0);
        assert_eq!(j.value, 0.5);
        assert_eq!(j.dx, 3.0);
        assert_eq!(j.dxx, 12.0);
        assert_eq!(j.dxxx, 24.0);
        assert_eq!(j.dt, 0.25);
        assert_eq!(j.dxt, 1.5);
        assert!(AnalyticField::parse(&g, &tg, "b*x", Bindings::new()).is_err());
    }

    #[test]
    fn bilinear_interpolation_reproduces_bilinear_fields() {
        let (g, tg) = grids(17, 8);
        let f = GridField::from_fn(&g, &tg, |x, t| 1.0 + 2.0 * x - t + 0.5 * x * t);
        let (x, t) = (0.123, 0.777);
        assert!((f.interpolate(x, t) - (1.0 + 2.0 * x - t + 0.5 * x * t)).abs() < 1e-12);
    }

    #[test]
    fn residual_norm_respects_mask_and_window() {
        let (g, tg) = grids(16, 4);
        let f = GridField::from_fn(&g, &tg, |x, _| x);
        let r = ResidualField::build(&[&f], |i, _| g.point(i));
        assert!(!r.is_valid(0, 2));
        assert!(!r.is_valid(5, 0));
        assert!((r.sup_norm() - g.point(13)).abs() < 1e-15);
        let w = Window::new(-0.5, 0.5, 0.0, 1.0);
        assert!(r.sup_norm_in(&w) <= 0.5);
    }

    #[test]
    fn sub_box_shapes() {
        let (g, tg) = grids(21, 10);
        let f = GridField::from_fn(&g, &tg, |x, t| x + 10.0 * t);
        let b = f.sub_box(5, 20, 2, 6).unwrap();
        assert_eq!(b.grid().len(), 16);
        assert_eq!(b.tgrid().n_slices(), 5);
        assert!((b.get(0, 0) - f.get(5, 2)).abs() < 1e-15);
        assert!(f.sub_box(5, 25, 0, 1).is_err());
    }
}
