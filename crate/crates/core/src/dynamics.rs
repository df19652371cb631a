//! Drifts of the Bernstein diffusion, path simulation in both time
//! directions and the stochastic integrals along simulated paths.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::field::{first_derivative, GridField};
use crate::grid::{SpatialGrid, TimeGrid};
use crate::rng::{open_unit, path_rng, standard_normal};
use crate::schroedinger::SchroedingerPair;
use crate::stats::{Estimate, Welford};

/// Time direction of a drift or of path integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Self::Forward => Self::Backward,
            Self::Backward => Self::Forward,
        }
    }
}

/// `B(x, t)` (forward) or `B*(x, t)` (backward) on the space-time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftField {
    direction: Direction,
    field: GridField,
    hbar: f64,
    provenance: Option<u64>,
}

impl DriftField {
    pub fn new(direction: Direction, field: GridField, hbar: f64, provenance: Option<u64>) -> Result<Self> {
        if let Some(node) = field.values().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("drift is not finite at node {node}")));
        }
        if !(hbar.is_finite() && hbar > 0.0) {
            return Err(Error::Domain(format!("hbar must be positive, got {hbar}")));
        }
        Ok(Self {
            direction,
            field,
            hbar,
            provenance,
        })
    }

    /// Drift sampled from a closed form `f(x, t)`.
    pub fn from_fn(
        grid: &SpatialGrid,
        tgrid: &TimeGrid,
        direction: Direction,
        hbar: f64,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        Self::new(direction, GridField::from_fn(grid, tgrid, f), hbar, None)
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn field(&self) -> &GridField {
        &self.field
    }

    pub fn grid(&self) -> &SpatialGrid {
        self.field.grid()
    }

    pub fn tgrid(&self) -> &TimeGrid {
        self.field.tgrid()
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn provenance(&self) -> Option<u64> {
        self.provenance
    }

    /// Bilinear value at an arbitrary point, clamped to the grid.
    pub fn value(&self, x: f64, t: f64) -> f64 {
        self.field.interpolate(x, t)
    }

    /// The same drift with every value shifted by `f(x, t)`.
    pub fn perturbed(&self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let grid = self.grid().clone();
        let tgrid = self.tgrid().clone();
        let xs = grid.points();
        let mut field = self.field.clone();
        for k in 0..tgrid.n_slices() {
            let t = tgrid.time(k);
            for (v, &x) in field.slice_mut(k).iter_mut().zip(&xs) {
                *v += f(x, t);
            }
        }
        Self::new(self.direction, field, self.hbar, None)
    }
}

fn log_gradient_drift(log_field: &GridField, scale: f64, name: &'static str) -> Result<GridField> {
    if let Some(node) = log_field.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonPositiveField { field: name, node });
    }
    let h = log_field.grid().spacing();
    let slices = (0..log_field.tgrid().n_slices())
        .map(|k| {
            first_derivative(log_field.slice(k), h)
                .into_iter()
                .map(|d| scale * d)
                .collect()
        })
        .collect();
    GridField::from_slices(log_field.grid(), log_field.tgrid(), slices)
}

/// `B = hbar d/dx log eta`.
pub fn forward_drift(pair: &SchroedingerPair) -> Result<DriftField> {
    let field = log_gradient_drift(pair.log_eta(), pair.hbar(), "eta")?;
    DriftField::new(Direction::Forward, field, pair.hbar(), Some(pair.id()))
}

/// `B* = -hbar d/dx log eta*`.
pub fn backward_drift(pair: &SchroedingerPair) -> Result<DriftField> {
    let field = log_gradient_drift(pair.log_eta_star(), -pair.hbar(), "eta_star")?;
    DriftField::new(Direction::Backward, field, pair.hbar(), Some(pair.id()))
}

/// Sup-norm of `B* - B + hbar d/dx log rho` over the grid.
pub fn osmotic_residual(pair: &SchroedingerPair) -> Result<f64> {
    let b = forward_drift(pair)?;
    let bs = backward_drift(pair)?;
    let osmotic = log_gradient_drift(&pair.log_rho(), pair.hbar(), "rho")?;
    Ok(bs
        .field()
        .values()
        .iter()
        .zip(b.field().values())
        .zip(osmotic.values())
        .map(|((s, f), o)| (s - f + o).abs())
        .fold(0.0, f64::max))
}

/// Law of the starting (or, for backward runs, final) position.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    /// Log density sampled on the drift's spatial grid.
    Density(Vec<f64>),
    Point(f64),
}

/// Piecewise-linear density on a grid with its exact CDF and quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    grid: SpatialGrid,
    density: Vec<f64>,
    cdf: Vec<f64>,
}

impl GridDensity {
    /// Normalises `exp(log_density)` to unit mass.
    pub fn new(grid: &SpatialGrid, log_density: &[f64]) -> Result<Self> {
        if log_density.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.len(),
                found: log_density.len(),
            });
        }
        let max = log_density.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if !max.is_finite() || log_density.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::InvalidDensity(
                "initial density must be finite and non-zero".into(),
            ));
        }
        let density: Vec<f64> = log_density.iter().map(|v| (v - max).exp()).collect();
        let h = grid.spacing();
        let mut cdf = Vec::with_capacity(density.len());
        cdf.push(0.0);
        for w in density.windows(2) {
            let last = cdf[cdf.len() - 1];
            cdf.push(last + 0.5 * h * (w[0] + w[1]));
        }
        let total = cdf[cdf.len() - 1];
        cdf.iter_mut().for_each(|c| *c /= total);
        let density = density.iter().map(|p| p / total).collect();
        Ok(Self {
            grid: grid.clone(),
            density,
            cdf,
        })
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let h = self.grid.spacing();
        let (cell, frac) = self.grid.locate(x);
        let cell = cell.min(self.cdf.len() - 2);
        let (p0, p1) = (self.density[cell], self.density[cell + 1]);
        let s = frac * h;
        (self.cdf[cell] + p0 * s + 0.5 * (p1 - p0) * s * s / h).clamp(0.0, 1.0)
    }

    /// Inverse CDF.
    pub fn quantile(&self, u: f64) -> f64 {
        let cell = self.cdf.partition_point(|&c| c <= u).clamp(1, self.cdf.len() - 1) - 1;
        let (p0, p1) = (self.density[cell], self.density[cell + 1]);
        let h = self.grid.spacing();
        let target = u - self.cdf[cell];
        // mass up to offset s in the cell: p0 s + (p1 - p0) s^2 / (2h)
        let a = 0.5 * (p1 - p0) / h;
        let s = if a.abs() < 1e-14 * (p0 + p1).max(1e-300) / h {
            if p0 > 0.0 {
                target / p0
            } else {
                0.5 * h
            }
        } else {
            let disc = (p0 * p0 + 4.0 * a * target).max(0.0);
            2.0 * target / (p0 + disc.sqrt())
        };
        self.grid.point(cell) + s.clamp(0.0, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOptions {
    pub n_paths: usize,
    /// Euler-Maruyama steps per time-grid step.
    pub substeps: usize,
    pub seed: u64,
    /// Keep every Euler-Maruyama step instead of only the grid slices.
    pub record_substeps: bool,
}

impl SimulationOptions {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self {
            n_paths,
            substeps: 1,
            seed,
            record_substeps: false,
        }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn recording_substeps(mut self) -> Self {
        self.record_substeps = true;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_paths == 0 || self.substeps == 0 {
            return Err(Error::Domain("need at least one path and one substep".into()));
        }
        Ok(())
    }

    fn recorded_grid(&self, tgrid: &TimeGrid) -> TimeGrid {
        if self.record_substeps {
            TimeGrid::new(tgrid.t_start(), tgrid.t_end(), tgrid.n_steps() * self.substeps)
                .expect("refinement of a valid grid")
        } else {
            tgrid.clone()
        }
    }
}

/// One simulated path; positions are aligned with the ensemble's times.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub stream: u64,
    pub positions: Vec<f64>,
    /// The path touched the grid boundary and was clamped.
    pub clamped: bool,
}

/// Paths that share one time grid, stored in ascending time.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    tgrid: TimeGrid,
    direction: Direction,
    seed: u64,
    step: f64,
    paths: Vec<SamplePath>,
}

impl PathEnsemble {
    pub fn from_paths(
        tgrid: TimeGrid,
        direction: Direction,
        seed: u64,
        step: f64,
        paths: Vec<SamplePath>,
    ) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::Domain("an ensemble needs at least one path".into()));
        }
        if let Some(p) = paths.iter().find(|p| p.positions.len() != tgrid.n_slices()) {
            return Err(Error::ShapeMismatch {
                expected: tgrid.n_slices(),
                found: p.positions.len(),
            });
        }
        Ok(Self {
            tgrid,
            direction,
            seed,
            step,
            paths,
        })
    }

    /// The slices `first..=last` as an ensemble of their own.
    pub fn restricted(&self, first: usize, last: usize) -> Result<Self> {
        let tgrid = self.tgrid.subgrid(first, last)?;
        let paths = self
            .paths
            .iter()
            .map(|p| SamplePath {
                stream: p.stream,
                positions: p.positions[first..=last].to_vec(),
                clamped: p.clamped,
            })
            .collect();
        Self::from_paths(tgrid, self.direction, self.seed, self.step, paths)
    }

    pub fn tgrid(&self) -> &TimeGrid {
        &self.tgrid
    }

    pub fn times(&self) -> Vec<f64> {
        self.tgrid.times()
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Euler-Maruyama step used to generate the paths.
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn paths(&self) -> &[SamplePath] {
        &self.paths
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Positions of every path at slice `k`.
    pub fn slice(&self, k: usize) -> Vec<f64> {
        self.paths.iter().map(|p| p.positions[k]).collect()
    }

    pub fn clamped_fraction(&self) -> f64 {
        self.paths.iter().filter(|p| p.clamped).count() as f64 / self.paths.len() as f64
    }

    /// Fails if more than 0.1% of the paths were clamped.
    pub fn check_clamping(&self) -> Result<()> {
        let f = self.clamped_fraction();
        if f > 1e-3 {
            return Err(Error::DomainExceeded(format!(
                "{:.3}% of paths left the grid",
                100.0 * f
            )));
        }
        Ok(())
    }

    /// Sample mean and standard error of `f(X(t_k), t_k)`.
    pub fn mean_at(&self, k: usize, f: impl Fn(f64, f64) -> f64) -> Estimate {
        let t = self.tgrid.time(k);
        let mut acc = Welford::default();
        for p in &self.paths {
            acc.push(f(p.positions[k], t));
        }
        acc.estimate()
    }
}

fn check_drift_law(drift: &DriftField, law: &InitialLaw) -> Result<Option<GridDensity>> {
    match law {
        InitialLaw::Density(d) => GridDensity::new(drift.grid(), d).map(Some),
        InitialLaw::Point(x) => {
            if !drift.grid().contains(*x) {
                return Err(Error::DomainExceeded(format!("start {x} is outside the grid")));
            }
            Ok(None)
        }
    }
}

/// Validated simulation setup that produces any path of an ensemble by its
/// stream index, so paths can be generated in any order or in parallel.
#[derive(Debug, Clone)]
pub struct PathSimulator<'a> {
    drift: &'a DriftField,
    start: Option<f64>,
    sampler: Option<GridDensity>,
    opts: SimulationOptions,
}

impl<'a> PathSimulator<'a> {
    pub fn new(drift: &'a DriftField, law: &InitialLaw, opts: &SimulationOptions) -> Result<Self> {
        opts.validate()?;
        let sampler = check_drift_law(drift, law)?;
        let start = match law {
            InitialLaw::Point(x) => Some(*x),
            InitialLaw::Density(_) => None,
        };
        Ok(Self {
            drift,
            start,
            sampler,
            opts: opts.clone(),
        })
    }

    /// Forward drifts integrate from `s` to `u`, backward drifts from `u`
    /// down to `s` with `X(t - dt) = X(t) - B* dt + sqrt(hbar dt) xi`.
    pub fn path(&self, stream: u64) -> SamplePath {
        let drift = self.drift;
        let opts = &self.opts;
        let tgrid = drift.tgrid();
        let grid = drift.grid();
        let (lo, hi) = (grid.x_min(), grid.x_max());
        let m = tgrid.n_steps();
        let sub = opts.substeps;
        let dt = tgrid.step() / sub as f64;
        let noise = (drift.hbar() * dt).sqrt();
        let mut rng = path_rng(opts.seed, stream);
        let mut x = match (&self.sampler, self.start) {
            (Some(s), _) => s.quantile(open_unit(&mut rng)),
            (None, Some(x)) => x,
            (None, None) => unreachable!("a law is either a point or a density"),
        };
        let recorded = if opts.record_substeps { m * sub + 1 } else { m + 1 };
        let mut positions = vec![0.0; recorded];
        let mut clamped = false;
        let forward = drift.direction() == Direction::Forward;
        let record = |positions: &mut Vec<f64>, step: usize, x: f64| {
            let idx = if forward { step } else { m * sub - step };
            if opts.record_substeps {
                positions[idx] = x;
            } else if idx % sub == 0 {
                positions[idx / sub] = x;
            }
        };
        record(&mut positions, 0, x);
        for step in 0..m * sub {
            let t = if forward {
                tgrid.t_start() + step as f64 * dt
            } else {
                tgrid.t_end() - step as f64 * dt
            };
            let b = drift.value(x, t);
            let xi = standard_normal(&mut rng);
            x = if forward {
                x + b * dt + noise * xi
            } else {
                x - b * dt + noise * xi
            };
            if x < lo || x > hi {
                x = x.clamp(lo, hi);
                clamped = true;
            }
            record(&mut positions, step + 1, x);
        }
        SamplePath {
            stream,
            positions,
            clamped,
        }
    }

    pub fn n_paths(&self) -> usize {
        self.opts.n_paths
    }

    /// Wraps paths produced by [`Self::path`] into an ensemble.
    pub fn assemble(&self, paths: Vec<SamplePath>) -> Result<PathEnsemble> {
        PathEnsemble::from_paths(
            self.opts.recorded_grid(self.drift.tgrid()),
            self.drift.direction(),
            self.opts.seed,
            self.drift.tgrid().step() / self.opts.substeps as f64,
            paths,
        )
    }
}

/// Simulates path `stream` of an ensemble.
pub fn simulate_path(
    drift: &DriftField,
    law: &InitialLaw,
    opts: &SimulationOptions,
    stream: u64,
) -> Result<SamplePath> {
    Ok(PathSimulator::new(drift, law, opts)?.path(stream))
}

fn simulate(drift: &DriftField, law: &InitialLaw, opts: &SimulationOptions) -> Result<PathEnsemble> {
    let sim = PathSimulator::new(drift, law, opts)?;
    let paths = (0..opts.n_paths as u64).map(|p| sim.path(p)).collect();
    sim.assemble(paths)
}

/// Euler-Maruyama ensemble of `dX = B dt + sqrt(hbar) dW` from `s` to `u`.
pub fn simulate_forward(drift: &DriftField, initial: &InitialLaw, opts: &SimulationOptions) -> Result<PathEnsemble> {
    if drift.direction() != Direction::Forward {
        return Err(Error::InvalidField("forward simulation needs a forward drift".into()));
    }
    simulate(drift, initial, opts)
}

/// Backward ensemble driven by `B*`, started from the law at `u`.
pub fn simulate_backward(drift: &DriftField, terminal: &InitialLaw, opts: &SimulationOptions) -> Result<PathEnsemble> {
    if drift.direction() != Direction::Backward {
        return Err(Error::InvalidField("backward simulation needs a backward drift".into()));
    }
    simulate(drift, terminal, opts)
}

/// `X^(t) = X(u + s - t)`; the direction flag is flipped.
pub fn time_reverse(ensemble: &PathEnsemble) -> PathEnsemble {
    let paths = ensemble
        .paths
        .iter()
        .map(|p| SamplePath {
            stream: p.stream,
            positions: p.positions.iter().rev().copied().collect(),
            clamped: p.clamped,
        })
        .collect();
    PathEnsemble {
        tgrid: ensemble.tgrid.clone(),
        direction: ensemble.direction.flipped(),
        seed: ensemble.seed,
        step: ensemble.step,
        paths,
    }
}

/// Binned regression estimate of a conditional mean velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftBin {
    /// Mean position of the paths in the bin.
    pub x: f64,
    /// Mean of `(X(t_{k+1}) - X(t_k)) / dt` in the bin.
    pub drift: Estimate,
    /// Mean of a reference drift evaluated at the same positions.
    pub reference: f64,
}

/// Regresses forward increments at slice `k` on `X(t_k)` with `n_bins`
/// equal-count bins, comparing each bin with `reference(x, t_k)`.
pub fn regress_forward_drift(
    ensemble: &PathEnsemble,
    k: usize,
    n_bins: usize,
    reference: impl Fn(f64, f64) -> f64,
) -> Result<Vec<DriftBin>> {
    let tgrid = ensemble.tgrid();
    if k >= tgrid.n_steps() {
        return Err(Error::Domain(format!("slice {k} has no forward increment")));
    }
    if n_bins == 0 || ensemble.len() < n_bins {
        return Err(Error::Domain(format!(
            "{} paths cannot fill {n_bins} bins",
            ensemble.len()
        )));
    }
    let dt = tgrid.step();
    let t = tgrid.time(k);
    let mut pairs: Vec<(f64, f64)> = ensemble
        .paths()
        .iter()
        .map(|p| (p.positions[k], (p.positions[k + 1] - p.positions[k]) / dt))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len();
    Ok((0..n_bins)
        .map(|b| {
            let chunk = &pairs[b * n / n_bins..(b + 1) * n / n_bins];
            let mut acc = Welford::default();
            let (mut xs, mut refs) = (0.0, 0.0);
            for &(x, v) in chunk {
                acc.push(v);
                xs += x;
                refs += reference(x, t);
            }
            let len = chunk.len() as f64;
            DriftBin {
                x: xs / len,
                drift: acc.estimate(),
                reference: refs / len,
            }
        })
        .collect())
}

/// Vector potential `A(x)`, used only as an integrand.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldA {
    grid: SpatialGrid,
    values: Vec<f64>,
    divergence: Vec<f64>,
}

impl VectorFieldA {
    pub fn new(grid: &SpatialGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.len(),
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("A is not finite at node {i}")));
        }
        let divergence = first_derivative(&values, grid.spacing());
        Ok(Self {
            grid: grid.clone(),
            values,
            divergence,
        })
    }

    pub fn from_fn(grid: &SpatialGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid, grid.points().into_iter().map(f).collect())
    }

    pub fn value(&self, x: f64) -> f64 {
        self.grid.interpolate(&self.values, x)
    }

    pub fn divergence(&self, x: f64) -> f64 {
        self.grid.interpolate(&self.divergence, x)
    }
}

/// Per-path values of a path functional with their ensemble mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PathFunctional {
    pub per_path: Vec<f64>,
    pub estimate: Estimate,
}

impl PathFunctional {
    pub fn from_values(per_path: Vec<f64>) -> Self {
        let estimate = Estimate::from_samples(&per_path);
        Self { per_path, estimate }
    }

    /// Path-by-path `a - b`.
    pub fn minus(&self, other: &Self) -> Self {
        Self::from_values(self.per_path.iter().zip(&other.per_path).map(|(a, b)| a - b).collect())
    }

    /// Path-by-path `a + c b`.
    pub fn plus_scaled(&self, other: &Self, c: f64) -> Self {
        Self::from_values(
            self.per_path
                .iter()
                .zip(&other.per_path)
                .map(|(a, b)| a + c * b)
                .collect(),
        )
    }
}

fn path_sums(ensemble: &PathEnsemble, f: impl Fn(f64, f64) -> f64) -> PathFunctional {
    PathFunctional::from_values(
        ensemble
            .paths()
            .iter()
            .map(|p| p.positions.windows(2).map(|w| f(w[0], w[1])).sum())
            .collect(),
    )
}

/// `sum A(X_k) (X_{k+1} - X_k)`.
pub fn ito_forward_integral(ensemble: &PathEnsemble, a: &VectorFieldA) -> PathFunctional {
    path_sums(ensemble, |x0, x1| a.value(x0) * (x1 - x0))
}

/// `sum A(X_{k+1}) (X_{k+1} - X_k)`.
pub fn ito_backward_integral(ensemble: &PathEnsemble, a: &VectorFieldA) -> PathFunctional {
    path_sums(ensemble, |x0, x1| a.value(x1) * (x1 - x0))
}

/// `sum (A(X_k) + A(X_{k+1})) / 2 (X_{k+1} - X_k)`.
pub fn stratonovich_integral(ensemble: &PathEnsemble, a: &VectorFieldA) -> PathFunctional {
    path_sums(ensemble, |x0, x1| 0.5 * (a.value(x0) + a.value(x1)) * (x1 - x0))
}

/// Midpoint sum of a time-dependent integrand `f(X, t) o dX`.
pub fn stratonovich_integral_with(ensemble: &PathEnsemble, f: impl Fn(f64, f64) -> f64) -> PathFunctional {
    let times = ensemble.times();
    PathFunctional::from_values(
        ensemble
            .paths()
            .iter()
            .map(|p| {
                p.positions
                    .windows(2)
                    .zip(times.windows(2))
                    .map(|(x, t)| 0.5 * (f(x[0], t[0]) + f(x[1], t[1])) * (x[1] - x[0]))
                    .sum()
            })
            .collect(),
    )
}

/// Trapezoid time integral of `f(X(t), t)` along every path.
pub fn time_integral(ensemble: &PathEnsemble, f: impl Fn(f64, f64) -> f64) -> PathFunctional {
    let times = ensemble.times();
    PathFunctional::from_values(
        ensemble
            .paths()
            .iter()
            .map(|p| {
                p.positions
                    .windows(2)
                    .zip(times.windows(2))
                    .map(|(x, t)| 0.5 * (t[1] - t[0]) * (f(x[0], t[0]) + f(x[1], t[1])))
                    .sum()
            })
            .collect(),
    )
}

/// `integral dA/dx (X(t)) dt` along every path.
pub fn divergence_integral(ensemble: &PathEnsemble, a: &VectorFieldA) -> PathFunctional {
    time_integral(ensemble, |x, _| a.divergence(x))
}

/// Estimate of `E[X (B*(X,t) - B(X,t))]` at slice `k` of the ensemble.
pub fn uncertainty_estimate(
    forward: &DriftField,
    backward: &DriftField,
    ensemble: &PathEnsemble,
    k: usize,
) -> Result<Estimate> {
    if forward.direction() != Direction::Forward || backward.direction() != Direction::Backward {
        return Err(Error::InvalidField("need one forward and one backward drift".into()));
    }
    if forward.provenance() != backward.provenance() {
        return Err(Error::ProvenanceMismatch);
    }
    if k >= ensemble.tgrid().n_slices() {
        return Err(Error::Domain(format!("slice {k} is outside the ensemble")));
    }
    Ok(ensemble.mean_at(k, |x, t| x * (backward.value(x, t) - forward.value(x, t))))
}
