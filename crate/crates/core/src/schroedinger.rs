//! The nonlinear boundary system for `(eta*_s, eta_u)` and the measures it
//! induces.
//!
//! Everything is kept in log form. A boundary density of width `0.02` on a
//! grid of half-width `8` spans tens of thousands of orders of magnitude, which
//! no linear representation survives.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::field::GridField;
use crate::grid::{SpatialGrid, TimeGrid};
use crate::kernel::{Propagator, PropagatorKernel};
use crate::numerics::{fingerprint, log_sum_exp};

/// `ln(1e-300)`; denominators below this are reported as underflow.
const LOG_UNDERFLOW: f64 = -690.775_527_898_213_7;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A named family of boundary densities.
#[derive(Debug, Clone, PartialEq)]
pub enum DensitySpec {
    Gaussian {
        mean: f64,
        std: f64,
    },
    /// `(weight, mean, std)` components; weights are normalized.
    Mixture(Vec<(f64, f64, f64)>),
    /// Nodal values on the spatial grid, renormalized on use.
    Tabulated(Vec<f64>),
}

fn log_normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let d = (x - mean) / std;
    -0.5 * (LN_2PI + d * d) - std.ln()
}

impl DensitySpec {
    fn components(&self) -> &[(f64, f64, f64)] {
        match self {
            Self::Mixture(c) => c,
            _ => &[],
        }
    }

    fn validate(&self, grid: &SpatialGrid) -> Result<()> {
        let check = |mean: f64, std: f64| {
            if !(mean.is_finite() && std.is_finite() && std > 0.0) {
                return Err(Error::InvalidDensity(format!(
                    "gaussian needs a finite mean and positive std, got ({mean}, {std})"
                )));
            }
            Ok(())
        };
        match self {
            Self::Gaussian { mean, std } => check(*mean, *std),
            Self::Mixture(c) => {
                if c.is_empty() {
                    return Err(Error::InvalidDensity("empty mixture".into()));
                }
                for &(w, m, s) in c {
                    if !(w.is_finite() && w > 0.0) {
                        return Err(Error::InvalidDensity(format!(
                            "mixture weights must be positive, got {w}"
                        )));
                    }
                    check(m, s)?;
                }
                Ok(())
            }
            Self::Tabulated(v) => {
                if v.len() != grid.len() {
                    return Err(Error::ShapeMismatch {
                        expected: grid.len(),
                        found: v.len(),
                    });
                }
                match v.iter().position(|p| !(p.is_finite() && *p > 0.0)) {
                    Some(i) => Err(Error::InvalidDensity(format!(
                        "tabulated density must be strictly positive, node {i} is {}",
                        v[i]
                    ))),
                    None => Ok(()),
                }
            }
        }
    }

    /// Unnormalized log density at the grid nodes.
    pub fn log_sample(&self, grid: &SpatialGrid) -> Result<Vec<f64>> {
        self.validate(grid)?;
        let xs = grid.points();
        Ok(match self {
            Self::Gaussian { mean, std } => xs.iter().map(|&x| log_normal_pdf(x, *mean, *std)).collect(),
            Self::Mixture(c) => {
                let total: f64 = c.iter().map(|p| p.0).sum();
                xs.iter()
                    .map(|&x| log_sum_exp(c.iter().map(|&(w, m, s)| (w / total).ln() + log_normal_pdf(x, m, s))))
                    .collect()
            }
            Self::Tabulated(v) => v.iter().map(|p| p.ln()).collect(),
        })
    }

    /// Human-readable warnings about the grid resolving this density.
    pub fn adequacy_warnings(&self, grid: &SpatialGrid) -> Vec<String> {
        let mut out = Vec::new();
        let gaussians: Vec<(f64, f64)> = match self {
            Self::Gaussian { mean, std } => vec![(*mean, *std)],
            _ => self.components().iter().map(|&(_, m, s)| (m, s)).collect(),
        };
        for (mean, std) in gaussians {
            if mean - 6.0 * std < grid.x_min() || mean + 6.0 * std > grid.x_max() {
                out.push(format!(
                    "domain [{}, {}] does not cover 6 standard deviations of N({mean}, {std}^2)",
                    grid.x_min(),
                    grid.x_max()
                ));
            }
            if std < 2.0 * grid.spacing() {
                out.push(format!("std {std} is below twice the grid spacing {}", grid.spacing()));
            }
        }
        if let Self::Tabulated(v) = self {
            let max = v.iter().fold(0.0f64, |a, &b| a.max(b));
            let edge = v[0].max(v[v.len() - 1]);
            if edge > 1e-8 * max {
                out.push(format!(
                    "tabulated density is {:.1e} of its peak at the grid edge",
                    edge / max
                ));
            }
        }
        out
    }
}

/// Strictly positive boundary densities `P_s`, `P_u`, normalized under the
/// grid quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryDensities {
    grid: SpatialGrid,
    log_p_s: Vec<f64>,
    log_p_u: Vec<f64>,
    warnings: Vec<String>,
}

impl BoundaryDensities {
    /// Takes log densities; each must integrate to 1 within `1e-10`.
    pub fn new(grid: &SpatialGrid, log_p_s: Vec<f64>, log_p_u: Vec<f64>) -> Result<Self> {
        for (name, v) in [("P_s", &log_p_s), ("P_u", &log_p_u)] {
            if v.len() != grid.len() {
                return Err(Error::ShapeMismatch {
                    expected: grid.len(),
                    found: v.len(),
                });
            }
            if let Some(i) = v.iter().position(|p| !p.is_finite()) {
                return Err(Error::InvalidDensity(format!(
                    "{name} must be strictly positive and finite, node {i} has log value {}",
                    v[i]
                )));
            }
            let mass = grid.log_integrate(v).exp();
            if (mass - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidDensity(format!("{name} integrates to {mass}, not 1")));
            }
        }
        Ok(Self {
            grid: grid.clone(),
            log_p_s,
            log_p_u,
            warnings: Vec::new(),
        })
    }

    /// Samples and normalizes two density families.
    pub fn from_specs(grid: &SpatialGrid, initial: &DensitySpec, terminal: &DensitySpec) -> Result<Self> {
        let normalize = |spec: &DensitySpec| -> Result<Vec<f64>> {
            let mut v = spec.log_sample(grid)?;
            let z = grid.log_integrate(&v);
            if !z.is_finite() {
                return Err(Error::InvalidDensity("density has no mass on the grid".into()));
            }
            v.iter_mut().for_each(|p| *p -= z);
            if let Some(i) = v.iter().position(|p| !p.is_finite()) {
                return Err(Error::InvalidDensity(format!("density underflows at node {i}")));
            }
            Ok(v)
        };
        let mut bd = Self::new(grid, normalize(initial)?, normalize(terminal)?)?;
        bd.warnings = initial
            .adequacy_warnings(grid)
            .into_iter()
            .chain(terminal.adequacy_warnings(grid))
            .collect();
        Ok(bd)
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn log_p_s(&self) -> &[f64] {
        &self.log_p_s
    }

    pub fn log_p_u(&self) -> &[f64] {
        &self.log_p_u
    }

    pub fn p_s(&self) -> Vec<f64> {
        self.log_p_s.iter().map(|v| v.exp()).collect()
    }

    pub fn p_u(&self) -> Vec<f64> {
        self.log_p_u.iter().map(|v| v.exp()).collect()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Starting `log eta_u`; `None` means `eta_u = 1`.
    pub initial_log_eta_u: Option<Vec<f64>>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
            initial_log_eta_u: None,
        }
    }
}

/// Converged boundary functions, gauge-fixed to `integral eta*_s = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPair {
    pub log_eta_star_s: Vec<f64>,
    pub log_eta_u: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    /// Marginal residual after every sweep.
    pub history: Vec<f64>,
}

fn check_underflow(log_denominator: &[f64]) -> Result<()> {
    match log_denominator.iter().position(|v| !(*v >= LOG_UNDERFLOW)) {
        Some(node) => Err(Error::Underflow {
            node,
            value: log_denominator[node].exp(),
        }),
        None => Ok(()),
    }
}

/// `max |exp(a_i + b_i) - exp(c_i)|`.
fn sup_gap(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((x, y), z)| ((x + y).exp() - z.exp()).abs())
        .fold(0.0, f64::max)
}

/// Iterative proportional fitting in log form:
/// `eta*_s <- P_s / (K eta_u)`, `eta_u <- P_u / (K^T eta*_s)`.
pub fn solve_boundary_pair(
    kernel: &PropagatorKernel,
    bd: &BoundaryDensities,
    opts: &SolverOptions,
) -> Result<BoundaryPair> {
    let grid = kernel.grid();
    if grid != bd.grid() {
        return Err(Error::InvalidGrid("kernel and densities use different grids".into()));
    }
    kernel.check_positive()?;
    let n = grid.len();
    let mut log_eta_u = match &opts.initial_log_eta_u {
        Some(v) if v.len() != n => {
            return Err(Error::ShapeMismatch {
                expected: n,
                found: v.len(),
            })
        }
        Some(v) => {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidField("initial eta_u must be positive".into()));
            }
            v.clone()
        }
        None => vec![0.0; n],
    };
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    for iteration in 1..=opts.max_iter {
        let denom_s = kernel.log_apply_forward(&log_eta_u)?;
        check_underflow(&denom_s)?;
        let mut log_eta_star_s: Vec<f64> = bd.log_p_s().iter().zip(&denom_s).map(|(p, d)| p - d).collect();
        let gauge = grid.log_integrate(&log_eta_star_s);
        log_eta_star_s.iter_mut().for_each(|v| *v -= gauge);
        log_eta_u.iter_mut().for_each(|v| *v += gauge);
        let denom_u = kernel.log_apply_backward(&log_eta_star_s)?;
        check_underflow(&denom_u)?;
        let denom_s: Vec<f64> = denom_s.iter().map(|d| d + gauge).collect();
        residual = sup_gap(&log_eta_star_s, &denom_s, bd.log_p_s()).max(sup_gap(&log_eta_u, &denom_u, bd.log_p_u()));
        history.push(residual);
        if residual < opts.tol {
            return Ok(BoundaryPair {
                log_eta_star_s,
                log_eta_u,
                residual,
                iterations: iteration,
                history,
            });
        }
        if !residual.is_finite() {
            break;
        }
        for ((e, p), d) in log_eta_u.iter_mut().zip(bd.log_p_u()).zip(&denom_u) {
            *e = p - d;
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

/// Sup-norm residual of both lines of the boundary system.
pub fn marginal_residual(
    kernel: &PropagatorKernel,
    log_eta_star_s: &[f64],
    log_eta_u: &[f64],
    bd: &BoundaryDensities,
) -> Result<f64> {
    let a = kernel.log_apply_forward(log_eta_u)?;
    let b = kernel.log_apply_backward(log_eta_star_s)?;
    Ok(sup_gap(log_eta_star_s, &a, bd.log_p_s()).max(sup_gap(log_eta_u, &b, bd.log_p_u())))
}

/// Solved boundary pair together with `eta*` and `eta` on the whole
/// space-time grid.
#[derive(Debug, Clone)]
pub struct SchroedingerPair {
    propagator: Propagator,
    tgrid: TimeGrid,
    kernel: PropagatorKernel,
    boundary: BoundaryPair,
    log_eta_star: GridField,
    log_eta: GridField,
    id: u64,
}

/// Solves the boundary system on `tgrid` and propagates both boundary
/// functions across it.
pub fn solve_schroedinger_system(
    propagator: &Propagator,
    tgrid: &TimeGrid,
    bd: &BoundaryDensities,
    opts: &SolverOptions,
) -> Result<SchroedingerPair> {
    let kernel = propagator.kernel_on(tgrid)?;
    let boundary = solve_boundary_pair(&kernel, bd, opts)?;
    SchroedingerPair::from_boundary(propagator, tgrid, kernel, boundary)
}

impl SchroedingerPair {
    /// Builds the propagated fields for an already solved boundary pair.
    pub fn from_boundary(
        propagator: &Propagator,
        tgrid: &TimeGrid,
        kernel: PropagatorKernel,
        boundary: BoundaryPair,
    ) -> Result<Self> {
        let log_eta = propagator.propagate_backward(tgrid, &boundary.log_eta_u)?;
        let log_eta_star = propagator.propagate_forward(tgrid, &boundary.log_eta_star_s)?;
        for (name, f) in [("eta", &log_eta), ("eta_star", &log_eta_star)] {
            if let Some(node) = f.values().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonPositiveField { field: name, node });
            }
        }
        let cfg = propagator.cfg();
        let grid = propagator.grid();
        let header = [
            cfg.hbar,
            grid.x_min(),
            grid.x_max(),
            grid.len() as f64,
            tgrid.t_start(),
            tgrid.t_end(),
            tgrid.n_steps() as f64,
        ];
        let id = fingerprint(&[&header, &boundary.log_eta_star_s, &boundary.log_eta_u]);
        Ok(Self {
            propagator: propagator.clone(),
            tgrid: tgrid.clone(),
            kernel,
            boundary,
            log_eta_star,
            log_eta,
            id,
        })
    }

    pub fn grid(&self) -> &SpatialGrid {
        self.propagator.grid()
    }

    pub fn tgrid(&self) -> &TimeGrid {
        &self.tgrid
    }

    pub fn hbar(&self) -> f64 {
        self.propagator.cfg().hbar
    }

    pub fn propagator(&self) -> &Propagator {
        &self.propagator
    }

    /// Kernel over the full interval `[s, u]`.
    pub fn kernel(&self) -> &PropagatorKernel {
        &self.kernel
    }

    pub fn boundary(&self) -> &BoundaryPair {
        &self.boundary
    }

    pub fn log_eta_star_s(&self) -> &[f64] {
        &self.boundary.log_eta_star_s
    }

    pub fn log_eta_u(&self) -> &[f64] {
        &self.boundary.log_eta_u
    }

    pub fn eta_star_s(&self) -> Vec<f64> {
        self.boundary.log_eta_star_s.iter().map(|v| v.exp()).collect()
    }

    pub fn eta_u(&self) -> Vec<f64> {
        self.boundary.log_eta_u.iter().map(|v| v.exp()).collect()
    }

    /// `log eta*(x_i, t_k)`.
    pub fn log_eta_star(&self) -> &GridField {
        &self.log_eta_star
    }

    /// `log eta(x_i, t_k)`.
    pub fn log_eta(&self) -> &GridField {
        &self.log_eta
    }

    pub fn residual(&self) -> f64 {
        self.boundary.residual
    }

    pub fn iterations(&self) -> usize {
        self.boundary.iterations
    }

    /// Content fingerprint used as provenance by derived fields.
    pub fn id(&self) -> u64 {
        self.id
    }

    /// `log rho = log eta* + log eta`.
    pub fn log_rho(&self) -> GridField {
        self.log_eta_star
            .zip_map(&self.log_eta, |a, b| a + b)
            .expect("fields share grids")
    }

    /// The pair in the gauge `(c eta*, eta / c)`.
    pub fn rescaled(&self, c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Domain(format!("gauge constant must be positive, got {c}")));
        }
        let lc = c.ln();
        let mut out = self.clone();
        out.boundary.log_eta_star_s.iter_mut().for_each(|v| *v += lc);
        out.boundary.log_eta_u.iter_mut().for_each(|v| *v -= lc);
        out.log_eta_star = self.log_eta_star.map(|v| v + lc);
        out.log_eta = self.log_eta.map(|v| v - lc);
        Ok(out)
    }

    /// `rho = eta* eta` together with the mass error of every slice.
    pub fn marginals(&self) -> BernsteinMarginals {
        let log_rho = self.log_rho();
        let grid = self.grid();
        let mass_errors = (0..self.tgrid.n_slices())
            .map(|k| grid.log_integrate(log_rho.slice(k)).exp() - 1.0)
            .collect();
        BernsteinMarginals {
            rho: log_rho.map(f64::exp),
            mass_errors,
        }
    }

    fn slice_pair(&self, from: usize, to: usize) -> Result<PropagatorKernel> {
        if from >= to || to > self.tgrid.n_steps() {
            return Err(Error::Domain(format!(
                "need slice indices from < to <= {}, got {from}, {to}",
                self.tgrid.n_steps()
            )));
        }
        if from == 0 && to == self.tgrid.n_steps() {
            return Ok(self.kernel.clone());
        }
        self.propagator.slice_kernel(&self.tgrid, from, to)
    }

    /// `P(t, x_i, u', z_j) = h(t, x_i, u', z_j) eta_{u'}(z_j) / eta_t(x_i)`,
    /// rows indexed by `x`.
    pub fn forward_transition(&self, from: usize, to: usize) -> Result<TransitionMatrix> {
        let k = self.slice_pair(from, to)?;
        let n = self.grid().len();
        let eta_t = self.log_eta.slice(from);
        let eta_u = self.log_eta.slice(to);
        let mut log_entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                log_entries.push(k.log_entry(i, j) + eta_u[j] - eta_t[i]);
            }
        }
        Ok(TransitionMatrix {
            grid: self.grid().clone(),
            t_from: self.tgrid.time(from),
            t_to: self.tgrid.time(to),
            log_entries,
        })
    }

    /// `P*(s', y_i, t, x_j) = eta*_{s'}(y_i) h(s', y_i, t, x_j) / eta*_t(x_j)`,
    /// rows indexed by the earlier position `y`, columns normalized.
    pub fn backward_transition(&self, from: usize, to: usize) -> Result<TransitionMatrix> {
        let k = self.slice_pair(from, to)?;
        let n = self.grid().len();
        let star_s = self.log_eta_star.slice(from);
        let star_t = self.log_eta_star.slice(to);
        let mut log_entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                log_entries.push(star_s[i] + k.log_entry(i, j) - star_t[j]);
            }
        }
        Ok(TransitionMatrix {
            grid: self.grid().clone(),
            t_from: self.tgrid.time(from),
            t_to: self.tgrid.time(to),
            log_entries,
        })
    }

    /// Detailed-balance residual with `P_s`, `P_u` read off the marginal
    /// density of this pair.
    pub fn detailed_balance_residual(&self) -> Result<f64> {
        let m = self.tgrid.n_steps();
        let log_rho = self.log_rho();
        self.detailed_balance_against(log_rho.slice(0), log_rho.slice(m))
    }

    /// `max |P_s(x) P(s,x,u,z) - P*(s,x,u,z) P_u(z)|` for given log
    /// boundary laws and the transitions of this pair.
    pub fn detailed_balance_against(&self, log_p_s: &[f64], log_p_u: &[f64]) -> Result<f64> {
        let n = self.grid().len();
        for v in [log_p_s, log_p_u] {
            if v.len() != n {
                return Err(Error::ShapeMismatch {
                    expected: n,
                    found: v.len(),
                });
            }
        }
        let m = self.tgrid.n_steps();
        let fwd = self.forward_transition(0, m)?;
        let bwd = self.backward_transition(0, m)?;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let lhs = (log_p_s[i] + fwd.log_entry(i, j)).exp();
                let rhs = (bwd.log_entry(i, j) + log_p_u[j]).exp();
                worst = worst.max((lhs - rhs).abs());
            }
        }
        Ok(worst)
    }

    /// Joint law of `(X(s), X(u))` with quadrature weights folded in.
    pub fn joint_measure(&self) -> JointMeasure {
        let grid = self.grid();
        let n = grid.len();
        let lw = grid.log_weights();
        let (a, b) = (self.log_eta_star_s(), self.log_eta_u());
        let mut log_entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                log_entries.push(a[i] + lw[i] + self.kernel.log_entry(i, j) + b[j] + lw[j]);
            }
        }
        JointMeasure {
            grid: grid.clone(),
            log_entries,
        }
    }

    fn check_slices(&self, slices: &[usize]) -> Result<()> {
        if slices.is_empty() || slices.len() > 3 {
            return Err(Error::TooLarge(format!(
                "finite-dimensional densities support 1 to 3 times, got {}",
                slices.len()
            )));
        }
        let cells = (self.grid().len() as f64).powi(slices.len() as i32);
        if cells > (1u64 << 24) as f64 {
            return Err(Error::TooLarge(format!("{} grid cells exceed the 2^24 limit", cells)));
        }
        if slices.windows(2).any(|w| w[0] >= w[1]) || slices[slices.len() - 1] > self.tgrid.n_steps() {
            return Err(Error::Domain("times must be strictly increasing slice indices".into()));
        }
        Ok(())
    }

    /// Joint density of `(X(t_1), ..., X(t_n))` in the product form
    /// `eta*_{t_1}(x_1) h(t_1, x_1, t_2, x_2) ... eta_{t_n}(x_n)`, flattened
    /// row-major with `x_n` varying fastest.
    pub fn finite_dimensional_density(&self, slices: &[usize]) -> Result<Vec<f64>> {
        self.check_slices(slices)?;
        let first = self.log_eta_star.slice(slices[0]).to_vec();
        let last = self.log_eta.slice(slices[slices.len() - 1]).to_vec();
        self.chain(slices, first, last, |k, _| k.log_entries().to_vec())
    }

    /// The same joint density as an initial marginal times forward
    /// transitions.
    pub fn transition_product_density(&self, slices: &[usize]) -> Result<Vec<f64>> {
        self.check_slices(slices)?;
        let first = self.log_rho().slice(slices[0]).to_vec();
        let last = vec![0.0; self.grid().len()];
        self.chain(slices, first, last, |_, w| {
            self.forward_transition(w[0], w[1])
                .map(|t| t.log_entries)
                .unwrap_or_default()
        })
    }

    fn chain(
        &self,
        slices: &[usize],
        first: Vec<f64>,
        last: Vec<f64>,
        links: impl Fn(&PropagatorKernel, &[usize]) -> Vec<f64>,
    ) -> Result<Vec<f64>> {
        let n = self.grid().len();
        let mut out = first;
        for w in slices.windows(2) {
            let k = self.slice_pair(w[0], w[1])?;
            let link = links(&k, w);
            if link.len() != n * n {
                return Err(Error::ShapeMismatch {
                    expected: n * n,
                    found: link.len(),
                });
            }
            let mut next = Vec::with_capacity(out.len() * n);
            for &prefix in &out {
                let i = (next.len() / n) % n;
                next.extend(link[i * n..(i + 1) * n].iter().map(|l| prefix + l));
            }
            out = next;
        }
        for (idx, v) in out.iter_mut().enumerate() {
            *v = (*v + last[idx % n]).exp();
        }
        Ok(out)
    }

    /// Density over `q` at slice `at` of the process pinned at `x_i` (slice
    /// `from`) and `z_j` (slice `to`):
    /// `h(s,x,t,q) h(t,q,u,z) / h(s,x,u,z)`.
    pub fn bernstein_transition(&self, from: usize, i: usize, at: usize, to: usize, j: usize) -> Result<Vec<f64>> {
        bernstein_transition(&self.propagator, &self.tgrid, from, i, at, to, j)
    }
}

/// `Q(s, x_i, t, q, u, z_j)` on the grid for slice indices `from < at < to`.
pub fn bernstein_transition(
    propagator: &Propagator,
    tgrid: &TimeGrid,
    from: usize,
    i: usize,
    at: usize,
    to: usize,
    j: usize,
) -> Result<Vec<f64>> {
    if !(from < at && at < to && to <= tgrid.n_steps()) {
        return Err(Error::Domain(format!(
            "need from < at < to on the time grid, got {from}, {at}, {to}"
        )));
    }
    let n = propagator.grid().len();
    if i >= n || j >= n {
        return Err(Error::Domain(format!("node index out of range: {i}, {j}")));
    }
    let first = propagator.slice_kernel(tgrid, from, at)?;
    let second = propagator.slice_kernel(tgrid, at, to)?;
    let whole = propagator.slice_kernel(tgrid, from, to)?;
    let norm = whole.log_entry(i, j);
    Ok((0..n)
        .map(|q| (first.log_entry(i, q) + second.log_entry(q, j) - norm).exp())
        .collect())
}

/// `rho(x, t)` with the per-slice deviation of its mass from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BernsteinMarginals {
    pub rho: GridField,
    pub mass_errors: Vec<f64>,
}

impl BernsteinMarginals {
    pub fn max_mass_error(&self) -> f64 {
        self.mass_errors.iter().fold(0.0, |a, b| a.max(b.abs()))
    }
}

/// Transition density between two slices, stored in log form.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    grid: SpatialGrid,
    t_from: f64,
    t_to: f64,
    log_entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn t_from(&self) -> f64 {
        self.t_from
    }

    pub fn t_to(&self) -> f64 {
        self.t_to
    }

    #[inline]
    pub fn log_entry(&self, i: usize, j: usize) -> f64 {
        self.log_entries[i * self.grid.len() + j]
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.log_entry(i, j).exp()
    }

    /// `sum_j P_ij w_j` for every row.
    pub fn row_integrals(&self) -> Vec<f64> {
        let n = self.grid.len();
        let lw = self.grid.log_weights();
        (0..n)
            .map(|i| log_sum_exp((0..n).map(|j| self.log_entry(i, j) + lw[j])).exp())
            .collect()
    }

    /// `sum_i P_ij w_i` for every column.
    pub fn column_integrals(&self) -> Vec<f64> {
        let n = self.grid.len();
        let lw = self.grid.log_weights();
        (0..n)
            .map(|j| log_sum_exp((0..n).map(|i| self.log_entry(i, j) + lw[i])).exp())
            .collect()
    }
}

/// Discrete joint measure `M_ij = eta*_s(x_i) h(s,x_i,u,z_j) eta_u(z_j) w_i w_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMeasure {
    grid: SpatialGrid,
    log_entries: Vec<f64>,
}

impl JointMeasure {
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.log_entries[i * self.grid.len() + j].exp()
    }

    pub fn mass(&self) -> f64 {
        log_sum_exp(self.log_entries.iter().copied()).exp()
    }

    /// Density of the first marginal at the nodes.
    pub fn initial_marginal(&self) -> Vec<f64> {
        let n = self.grid.len();
        (0..n)
            .map(|i| log_sum_exp(self.log_entries[i * n..(i + 1) * n].iter().copied()).exp() / self.grid.weight(i))
            .collect()
    }

    /// Density of the second marginal at the nodes.
    pub fn terminal_marginal(&self) -> Vec<f64> {
        let n = self.grid.len();
        (0..n)
            .map(|j| log_sum_exp((0..n).map(|i| self.log_entries[i * n + j])).exp() / self.grid.weight(j))
            .collect()
    }

    /// Largest `|M_ij - M_ji|`.
    pub fn max_asymmetry(&self) -> f64 {
        let n = self.grid.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.entry(i, j) - self.entry(j, i)).abs());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelMethod;
    use crate::potential::{DeformationConfig, Potential};

    fn example_one(hbar: f64) -> (Propagator, TimeGrid, BoundaryDensities) {
        let grid = SpatialGrid::new(-12.0, 12.0, 385).unwrap();
        let tgrid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let cfg = DeformationConfig::new(hbar).unwrap();
        let prop = Propagator::new(&grid, &Potential::free(), &cfg, KernelMethod::Gaussian).unwrap();
        let bd = BoundaryDensities::from_specs(
            &grid,
            &DensitySpec::Gaussian { mean: 0.0, std: 1.0 },
            &DensitySpec::Gaussian {
                mean: 0.0,
                std: (1.0 + hbar).sqrt(),
            },
        )
        .unwrap();
        (prop, tgrid, bd)
    }

    fn solve(prop: &Propagator, tgrid: &TimeGrid, bd: &BoundaryDensities) -> SchroedingerPair {
        solve_schroedinger_system(prop, tgrid, bd, &SolverOptions::default()).unwrap()
    }

    fn non_increasing(history: &[f64]) -> bool {
        history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15)
    }

    #[test]
    fn trivial_solution_of_example_one() {
        let (prop, tgrid, bd) = example_one(1.0);
        let pair = solve(&prop, &tgrid, &bd);
        assert!(pair.iterations() <= 50, "{} iterations", pair.iterations());
        let eta = pair.eta_u();
        let mean = eta.iter().sum::<f64>() / eta.len() as f64;
        let worst = eta.iter().map(|v| (v / mean - 1.0).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "eta_u deviates by {worst}");
        // eta*_0 is chi itself once the gauge is fixed
        let chi = bd.p_s();
        let star = pair.eta_star_s();
        for i in 96..=288 {
            assert!((star[i] / chi[i] - 1.0).abs() < 1e-6);
        }
        assert!(non_increasing(&pair.boundary().history));
    }

    #[test]
    fn trivial_pair_satisfies_the_system() {
        let (prop, tgrid, bd) = example_one(1.0);
        let k = prop.kernel_on(&tgrid).unwrap();
        let r = marginal_residual(&k, bd.log_p_s(), &vec![0.0; 385], &bd).unwrap();
        assert!(r < 1e-8, "residual {r}");
        let mut bumped = vec![0.0; 385];
        bumped[192] = 1.1f64.ln();
        assert!(marginal_residual(&k, bd.log_p_s(), &bumped, &bd).unwrap() > 1e-3);
    }

    #[test]
    fn symmetric_data_gives_proportional_boundary_functions() {
        let grid = SpatialGrid::new(-8.0, 8.0, 129).unwrap();
        let tgrid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let cfg = DeformationConfig::new(1.0).unwrap();
        let prop = Propagator::preferred(&grid, &Potential::free(), &cfg);
        let n01 = DensitySpec::Gaussian { mean: 0.0, std: 1.0 };
        let bd = BoundaryDensities::from_specs(&grid, &n01, &n01).unwrap();
        let pair = solve(&prop, &tgrid, &bd);
        let ratios: Vec<f64> = pair
            .log_eta_star_s()
            .iter()
            .zip(pair.log_eta_u())
            .map(|(a, b)| a - b)
            .collect();
        for r in &ratios[32..=96] {
            assert!((r - ratios[64]).abs() < 1e-8);
        }
        let rho = pair.marginals().rho;
        let mid = 4;
        for i in 0..129 {
            assert!((rho.get(i, mid) - rho.get(128 - i, mid)).abs() < 1e-8);
        }
        assert!(pair.joint_measure().max_asymmetry() < 1e-12);
    }

    #[test]
    fn marginals_of_example_one_are_heat_evolved() {
        let (prop, tgrid, bd) = example_one(0.5);
        let pair = solve(&prop, &tgrid, &bd);
        let m = pair.marginals();
        assert!(m.max_mass_error() < 1e-6);
        for k in 0..=16 {
            let t = tgrid.time(k);
            let var = 1.0 + 0.5 * t;
            for i in (104..=280).step_by(8) {
                let x = prop.grid().point(i);
                let exact = (-x * x / (2.0 * var)).exp() / (2.0 * core::f64::consts::PI * var).sqrt();
                assert!((m.rho.get(i, k) - exact).abs() < 1e-8, "t {t} x {x}");
            }
        }
    }

    #[test]
    fn gauge_covariance() {
        let (prop, tgrid, bd) = example_one(1.0);
        let pair = solve(&prop, &tgrid, &bd);
        let other = pair.rescaled(3.7).unwrap();
        let (a, b) = (pair.marginals().rho, other.marginals().rho);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-12 * x.abs());
        }
        let (p, q) = (
            pair.forward_transition(2, 9).unwrap(),
            other.forward_transition(2, 9).unwrap(),
        );
        for i in (0..385).step_by(16) {
            for j in (0..385).step_by(16) {
                assert!((p.log_entry(i, j) - q.log_entry(i, j)).abs() < 1e-12);
            }
        }
        assert!(pair.rescaled(0.0).is_err());
    }

    #[test]
    fn uniqueness_up_to_gauge() {
        let (prop, tgrid, bd) = example_one(1.0);
        let a = solve(&prop, &tgrid, &bd);
        let opts = SolverOptions {
            initial_log_eta_u: Some(prop.grid().points().iter().map(|x| 0.3 * x.sin() - 0.1 * x).collect()),
            ..SolverOptions::default()
        };
        let b = solve_schroedinger_system(&prop, &tgrid, &bd, &opts).unwrap();
        let d: Vec<f64> = a.log_eta_u().iter().zip(b.log_eta_u()).map(|(x, y)| x - y).collect();
        for v in &d {
            assert!((v - d[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn transitions_are_normalized_and_balanced() {
        let (prop, tgrid, bd) = example_one(1.0);
        let pair = solve(&prop, &tgrid, &bd);
        let p = pair.forward_transition(3, 11).unwrap();
        let rows = p.row_integrals();
        for i in 96..=288 {
            assert!((rows[i] - 1.0).abs() < 1e-6, "row {i}: {}", rows[i]);
        }
        // eta = 1 makes the forward transition the raw kernel
        let k = prop.slice_kernel(&tgrid, 3, 11).unwrap();
        for i in (96..=288).step_by(8) {
            for j in (96..=288).step_by(8) {
                assert!((p.entry(i, j) / k.entry(i, j) - 1.0).abs() < 1e-6);
            }
        }
        let q = pair.backward_transition(3, 11).unwrap();
        let cols = q.column_integrals();
        for j in 96..=288 {
            assert!((cols[j] - 1.0).abs() < 1e-6);
        }
        assert!(pair.detailed_balance_residual().unwrap() < 1e-10);
        assert!(pair.forward_transition(5, 5).is_err());
    }

    #[test]
    fn mismatched_eta_breaks_detailed_balance() {
        let (prop, tgrid, bd) = example_one(1.0);
        let pair = solve(&prop, &tgrid, &bd);
        assert!(pair.detailed_balance_against(bd.log_p_s(), bd.log_p_u()).unwrap() < 1e-10);
        let other = BoundaryDensities::from_specs(
            prop.grid(),
            &DensitySpec::Gaussian { mean: 1.0, std: 0.5 },
            &DensitySpec::Gaussian { mean: -1.0, std: 1.0 },
        )
        .unwrap();
        assert!(pair.detailed_balance_against(other.log_p_s(), other.log_p_u()).unwrap() > 1e-2);
    }

    #[test]
    fn bernstein_transition_is_the_bridge_marginal() {
        let grid = SpatialGrid::new(-8.0, 8.0, 257).unwrap();
        let tgrid = TimeGrid::new(0.0, 2.0, 8).unwrap();
        let cfg = DeformationConfig::new(1.0).unwrap();
        let prop = Propagator::preferred(&grid, &Potential::free(), &cfg);
        let (i, j) = (112, 144);
        let (x, z) = (grid.point(i), grid.point(j));
        for at in [1, 3, 6] {
            let q = bernstein_transition(&prop, &tgrid, 0, i, at, 8, j).unwrap();
            assert!((grid.integrate(&q) - 1.0).abs() < 1e-6);
            let t = tgrid.time(at);
            let mean = x + t * (z - x) / 2.0;
            let var = t * (2.0 - t) / 2.0;
            let first = grid.integrate(&grid.points().iter().zip(&q).map(|(y, p)| y * p).collect::<Vec<_>>());
            assert!((first - mean).abs() < 1e-8);
            for (y, p) in grid.points().iter().zip(&q) {
                let exact = (-(y - mean).powi(2) / (2.0 * var)).exp() / (2.0 * core::f64::consts::PI * var).sqrt();
                assert!((p - exact).abs() < 1e-8);
            }
        }
        assert!(bernstein_transition(&prop, &tgrid, 0, i, 0, 8, j).is_err());
    }

    #[test]
    fn finite_dimensional_densities_agree() {
        let grid = SpatialGrid::new(-6.0, 6.0, 97).unwrap();
        let tgrid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let cfg = DeformationConfig::new(1.0).unwrap();
        let v = Potential::harmonic(1.0).unwrap();
        let prop = Propagator::preferred(&grid, &v, &cfg);
        let bd = BoundaryDensities::from_specs(
            &grid,
            &DensitySpec::Gaussian { mean: -0.5, std: 0.7 },
            &DensitySpec::Mixture(vec![(1.0, -1.0, 0.5), (2.0, 1.0, 0.6)]),
        )
        .unwrap();
        let pair = solve(&prop, &tgrid, &bd);
        let one = pair.finite_dimensional_density(&[3]).unwrap();
        let rho = pair.marginals().rho;
        for i in 0..97 {
            assert!((one[i] - rho.get(i, 3)).abs() < 1e-12);
        }
        for slices in [&[1usize, 5][..], &[2, 4, 7]] {
            let a = pair.finite_dimensional_density(slices).unwrap();
            let b = pair.transition_product_density(slices).unwrap();
            assert_eq!(a.len(), 97usize.pow(slices.len() as u32));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-8 * x.abs() + 1e-300);
            }
        }
        let two = pair.finite_dimensional_density(&[1, 5]).unwrap();
        let marginal: Vec<f64> = (0..97)
            .map(|i| (0..97).map(|j| two[i * 97 + j] * grid.weight(j)).sum())
            .collect();
        for i in 0..97 {
            assert!((marginal[i] - rho.get(i, 1)).abs() < 1e-6);
        }
        assert!(pair.finite_dimensional_density(&[1, 2, 3, 4]).is_err());
        assert!(pair.finite_dimensional_density(&[4, 2]).is_err());
    }

    #[test]
    fn joint_measure_reproduces_boundaries() {
        let (prop, tgrid, bd) = example_one(1.0);
        let pair = solve(&prop, &tgrid, &bd);
        let m = pair.joint_measure();
        assert!((m.mass() - 1.0).abs() < 1e-8);
        for (a, b) in m.initial_marginal().iter().zip(bd.p_s()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in m.terminal_marginal().iter().zip(bd.p_u()) {
            assert!((a - b).abs() < 1e-9);
        }
        // Example 1: M = chi(x) h(0, x, T, z)
        let k = pair.kernel();
        let chi = bd.p_s();
        let g = prop.grid();
        for i in (96..=288).step_by(16) {
            for j in (96..=288).step_by(16) {
                let expect = chi[i] * k.entry(i, j) * g.weight(i) * g.weight(j);
                assert!((m.entry(i, j) - expect).abs() < 1e-6 * expect);
            }
        }
    }

    #[test]
    fn narrow_bridge_converges_monotonically() {
        let grid = SpatialGrid::new(-4.0, 5.0, 901).unwrap();
        let tgrid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let cfg = DeformationConfig::new(1.0).unwrap();
        let prop = Propagator::preferred(&grid, &Potential::free(), &cfg);
        let bd = BoundaryDensities::from_specs(
            &grid,
            &DensitySpec::Gaussian { mean: 0.0, std: 0.02 },
            &DensitySpec::Gaussian { mean: 1.0, std: 0.02 },
        )
        .unwrap();
        assert!(bd.warnings().is_empty(), "{:?}", bd.warnings());
        let pair = solve(&prop, &tgrid, &bd);
        assert!(
            non_increasing(&pair.boundary().history),
            "{:?}",
            pair.boundary().history
        );
        assert!(pair.marginals().max_mass_error() < 1e-6);
        assert!(pair.detailed_balance_residual().unwrap() < 1e-10);
    }

    #[test]
    fn boundary_validation() {
        let grid = SpatialGrid::new(-1.0, 1.0, 33).unwrap();
        let flat = vec![-(2.0f64.ln()); 33];
        assert!(BoundaryDensities::new(&grid, flat.clone(), flat.clone()).is_ok());
        let mut hole = flat.clone();
        hole[4] = f64::NEG_INFINITY;
        assert!(BoundaryDensities::new(&grid, hole, flat.clone()).is_err());
        let heavy: Vec<f64> = flat.iter().map(|v| v + 0.01).collect();
        assert!(BoundaryDensities::new(&grid, flat.clone(), heavy).is_err());
        let wide = DensitySpec::Gaussian { mean: 0.0, std: 0.5 };
        let bd = BoundaryDensities::from_specs(&grid, &wide, &wide).unwrap();
        assert!(!bd.warnings().is_empty());
        let narrow = DensitySpec::Gaussian { mean: 0.0, std: 0.05 };
        let bd = BoundaryDensities::from_specs(&grid, &narrow, &narrow).unwrap();
        assert!(bd.warnings().iter().any(|w| w.contains("spacing")));
        assert!(DensitySpec::Gaussian { mean: 0.0, std: 0.0 }.log_sample(&grid).is_err());
        assert!(DensitySpec::Tabulated(vec![1.0; 32]).log_sample(&grid).is_err());
    }

    #[test]
    fn non_convergence_and_underflow_are_reported() {
        let (prop, tgrid, _) = example_one(1.0);
        let k = prop.kernel_on(&tgrid).unwrap();
        let asym = BoundaryDensities::from_specs(
            prop.grid(),
            &DensitySpec::Gaussian { mean: -2.0, std: 0.5 },
            &DensitySpec::Gaussian { mean: 2.0, std: 0.5 },
        )
        .unwrap();
        let opts = SolverOptions {
            max_iter: 2,
            ..SolverOptions::default()
        };
        assert!(matches!(
            solve_boundary_pair(&k, &asym, &opts),
            Err(Error::NonConvergence { iterations: 2, .. })
        ));
        let short = DeformationConfig::new(1e-3).unwrap();
        let p = Propagator::preferred(prop.grid(), &Potential::free(), &short);
        let k = p.kernel(0.0, 1.0).unwrap();
        let far = BoundaryDensities::from_specs(
            prop.grid(),
            &DensitySpec::Gaussian { mean: -6.0, std: 0.3 },
            &DensitySpec::Gaussian { mean: 6.0, std: 0.3 },
        )
        .unwrap();
        assert!(matches!(
            solve_boundary_pair(&k, &far, &SolverOptions::default()),
            Err(Error::Underflow { .. })
        ));
    }
}
