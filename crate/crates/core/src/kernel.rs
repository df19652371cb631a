//! Positive integral kernels of `exp(-(u-s) H / hbar)` on a spatial grid.
//!
//! Kernels are stored as natural logarithms so that narrow boundary data and
//! long propagation times never underflow. Applying a kernel to a field uses
//! trapezoid weights, `(K f)(x_i) = sum_j K_ij w_j f_j`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::field::GridField;
use crate::grid::{SpatialGrid, TimeGrid};
use crate::numerics::ln_or_neg_inf;
use crate::potential::{DeformationConfig, Potential};
use crate::rng::{path_rng, standard_normal, PathRng};
use crate::stats::{Estimate, Welford};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelTag {
    Gaussian,
    Mehler,
    CrankNicolson,
    FeynmanKac,
    Identity,
}

fn check_interval(s: f64, u: f64) -> Result<f64> {
    if !(u > s) || !s.is_finite() || !u.is_finite() {
        return Err(Error::Domain(format!("need u > s, got s = {s}, u = {u}")));
    }
    Ok(u - s)
}

/// Free heat kernel `(2 pi hbar tau)^(-1/2) exp(-(z-x)^2 / (2 hbar tau))`.
pub fn gaussian_kernel(s: f64, x: f64, u: f64, z: f64, cfg: &DeformationConfig) -> Result<f64> {
    log_gaussian_kernel(s, x, u, z, cfg).map(f64::exp)
}

pub fn log_gaussian_kernel(s: f64, x: f64, u: f64, z: f64, cfg: &DeformationConfig) -> Result<f64> {
    let tau = check_interval(s, u)?;
    Ok(log_gaussian(x - z, cfg.hbar * tau))
}

#[inline]
fn log_gaussian(d: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - d * d / (2.0 * var)
}

/// Harmonic-oscillator kernel for `V = omega^2 x^2 / 2`.
pub fn mehler_kernel(s: f64, x: f64, u: f64, z: f64, omega: f64, cfg: &DeformationConfig) -> Result<f64> {
    log_mehler_kernel(s, x, u, z, omega, cfg).map(f64::exp)
}

pub fn log_mehler_kernel(s: f64, x: f64, u: f64, z: f64, omega: f64, cfg: &DeformationConfig) -> Result<f64> {
    let tau = check_interval(s, u)?;
    if !(omega.is_finite() && omega > 0.0) {
        return Err(Error::InvalidPotential(format!(
            "harmonic frequency must be positive, got {omega}"
        )));
    }
    let coeffs = MehlerCoefficients::new(omega, tau, cfg.hbar);
    Ok(coeffs.log_value(x, z))
}

/// Precomputed factors of the Mehler kernel for one duration.
#[derive(Debug, Clone, Copy)]
struct MehlerCoefficients {
    log_norm: f64,
    cross: f64,
    diag: f64,
}

impl MehlerCoefficients {
    fn new(omega: f64, tau: f64, hbar: f64) -> Self {
        let a = omega * tau;
        // omega / sinh(omega tau) -> 1 / tau as omega -> 0
        let ratio = if a < 1e-8 { 1.0 / tau } else { omega / a.sinh() };
        let diag = omega * (0.5 * a).tanh() / (2.0 * hbar);
        Self {
            log_norm: 0.5 * (ratio.ln() - LN_2PI - hbar.ln()),
            cross: ratio / (2.0 * hbar),
            diag,
        }
    }

    #[inline]
    fn log_value(&self, x: f64, z: f64) -> f64 {
        let d = x - z;
        self.log_norm - self.cross * d * d - self.diag * (x * x + z * z)
    }
}

/// Discretized kernel between two time slices.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatorKernel {
    s: f64,
    u: f64,
    grid: SpatialGrid,
    tag: KernelTag,
    log_entries: Vec<f64>,
}

impl PropagatorKernel {
    /// Builds a kernel from `log K_ij`; every entry must be finite.
    pub fn from_log_entries(grid: &SpatialGrid, s: f64, u: f64, tag: KernelTag, log_entries: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        if log_entries.len() != n * n {
            return Err(Error::ShapeMismatch {
                expected: n * n,
                found: log_entries.len(),
            });
        }
        let kernel = Self {
            s,
            u,
            grid: grid.clone(),
            tag,
            log_entries,
        };
        kernel.check_positive()?;
        Ok(kernel)
    }

    /// The discrete delta `1 / w_i` on the diagonal.
    pub fn identity(grid: &SpatialGrid, t: f64) -> Self {
        let n = grid.len();
        let mut log_entries = vec![f64::NEG_INFINITY; n * n];
        for i in 0..n {
            log_entries[i * n + i] = -grid.weight(i).ln();
        }
        Self {
            s: t,
            u: t,
            grid: grid.clone(),
            tag: KernelTag::Identity,
            log_entries,
        }
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn u(&self) -> f64 {
        self.u
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn tag(&self) -> KernelTag {
        self.tag
    }

    pub fn dim(&self) -> usize {
        self.grid.len()
    }

    #[inline]
    pub fn log_entry(&self, i: usize, j: usize) -> f64 {
        self.log_entries[i * self.grid.len() + j]
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.log_entry(i, j).exp()
    }

    pub fn log_entries(&self) -> &[f64] {
        &self.log_entries
    }

    /// Dense row-major matrix of kernel values.
    pub fn to_matrix(&self) -> Vec<f64> {
        self.log_entries.iter().map(|v| v.exp()).collect()
    }

    pub fn check_positive(&self) -> Result<()> {
        if self.tag == KernelTag::Identity {
            return Ok(());
        }
        let n = self.grid.len();
        match self.log_entries.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(Error::PositivityViolation { row: p / n, col: p % n }),
            None => Ok(()),
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.grid.len() {
            return Err(Error::ShapeMismatch {
                expected: self.grid.len(),
                found: len,
            });
        }
        Ok(())
    }

    fn check_nonnegative(f: &[f64]) -> Result<()> {
        if let Some(i) = f.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidField(format!(
                "field must be finite and non-negative, node {i} is {}",
                f[i]
            )));
        }
        Ok(())
    }

    /// `x_i -> log sum_j K_ij w_j exp(log_f_j)`.
    pub fn log_apply_forward(&self, log_f: &[f64]) -> Result<Vec<f64>> {
        self.check_len(log_f.len())?;
        let n = self.grid.len();
        let c: Vec<f64> = log_f
            .iter()
            .enumerate()
            .map(|(j, v)| v + self.grid.weight(j).ln())
            .collect();
        Ok((0..n)
            .map(|i| {
                let row = &self.log_entries[i * n..(i + 1) * n];
                lse_dot(row, &c)
            })
            .collect())
    }

    /// `z_j -> log sum_i exp(log_g_i) w_i K_ij`.
    pub fn log_apply_backward(&self, log_g: &[f64]) -> Result<Vec<f64>> {
        self.check_len(log_g.len())?;
        let n = self.grid.len();
        let c: Vec<f64> = log_g
            .iter()
            .enumerate()
            .map(|(i, v)| v + self.grid.weight(i).ln())
            .collect();
        let mut max = vec![f64::NEG_INFINITY; n];
        for i in 0..n {
            if c[i] == f64::NEG_INFINITY {
                continue;
            }
            let row = &self.log_entries[i * n..(i + 1) * n];
            for j in 0..n {
                max[j] = max[j].max(row[j] + c[i]);
            }
        }
        let mut sum = vec![0.0; n];
        for i in 0..n {
            if c[i] == f64::NEG_INFINITY {
                continue;
            }
            let row = &self.log_entries[i * n..(i + 1) * n];
            for j in 0..n {
                if max[j].is_finite() {
                    sum[j] += (row[j] + c[i] - max[j]).exp();
                }
            }
        }
        Ok(max
            .iter()
            .zip(&sum)
            .map(|(m, s)| if m.is_finite() { m + s.ln() } else { *m })
            .collect())
    }

    /// `eta(x) = integral K(x, z) f(z) dz`.
    pub fn apply_forward(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_len(f.len())?;
        Self::check_nonnegative(f)?;
        let log_f: Vec<f64> = f.iter().map(|&v| ln_or_neg_inf(v)).collect();
        Ok(self.log_apply_forward(&log_f)?.into_iter().map(f64::exp).collect())
    }

    /// `eta*(x) = integral g(y) K(y, x) dy`.
    pub fn apply_backward(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check_len(g.len())?;
        Self::check_nonnegative(g)?;
        let log_g: Vec<f64> = g.iter().map(|&v| ln_or_neg_inf(v)).collect();
        Ok(self.log_apply_backward(&log_g)?.into_iter().map(f64::exp).collect())
    }

    pub fn transpose(&self) -> Self {
        let n = self.grid.len();
        let mut log_entries = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                log_entries[j * n + i] = self.log_entries[i * n + j];
            }
        }
        Self {
            log_entries,
            ..self.clone()
        }
    }

    /// Chapman-Kolmogorov composition of a kernel over `[s, t]` with one
    /// over `[t, u]`.
    pub fn compose(&self, later: &Self) -> Result<Self> {
        if self.grid != later.grid {
            return Err(Error::InvalidGrid("kernels live on different grids".into()));
        }
        if (self.u - later.s).abs() > 1e-12 * (1.0 + self.u.abs()) {
            return Err(Error::Domain(format!(
                "cannot compose kernels ending at {} and starting at {}",
                self.u, later.s
            )));
        }
        let n = self.grid.len();
        let t = later.transpose();
        let logw = self.grid.log_weights();
        let mut out = vec![0.0; n * n];
        let mut buf = vec![0.0; n];
        for i in 0..n {
            for l in 0..n {
                buf[l] = self.log_entries[i * n + l] + logw[l];
            }
            for j in 0..n {
                out[i * n + j] = lse_dot(&t.log_entries[j * n..(j + 1) * n], &buf);
            }
        }
        let tag = if self.tag == later.tag {
            self.tag
        } else {
            KernelTag::CrankNicolson
        };
        Ok(Self {
            s: self.s,
            u: later.u,
            grid: self.grid.clone(),
            tag,
            log_entries: out,
        })
    }

    /// `sum_j K_ij w_j` for every row.
    pub fn row_integrals(&self) -> Vec<f64> {
        let zeros = vec![0.0; self.grid.len()];
        self.log_apply_forward(&zeros)
            .map(|v| v.into_iter().map(f64::exp).collect())
            .unwrap_or_default()
    }

    /// Largest `|K_ij - K_ji| / max(K_ij, K_ji)`.
    pub fn max_relative_asymmetry(&self) -> f64 {
        let n = self.grid.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let a = self.log_entry(i, j);
                let b = self.log_entry(j, i);
                if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
                    continue;
                }
                worst = worst.max(1.0 - (-(a - b).abs()).exp());
            }
        }
        worst
    }
}

/// `log sum_j exp(a_j + b_j)`.
#[inline]
pub(crate) fn lse_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (x, y) in a.iter().zip(b) {
        let v = x + y;
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return max;
    }
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        sum += (x + y - max).exp();
    }
    max + sum.ln()
}

fn closed_form_log_entries(grid: &SpatialGrid, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let xs = grid.points();
    let n = xs.len();
    let mut out = Vec::with_capacity(n * n);
    for &x in &xs {
        for &z in &xs {
            out.push(f(x, z));
        }
    }
    out
}

/// Crank-Nicolson time stepper for `d eta / d tau = (hbar/2) eta'' - (V/hbar) eta`
/// with homogeneous Dirichlet data just outside the grid.
///
/// The step is split into substeps short enough that both CN matrices are
/// entrywise non-negative, which makes every propagated kernel positive.
#[derive(Debug, Clone)]
struct CnStepper {
    n: usize,
    off: f64,
    right_diag: Vec<f64>,
    // Thomas factorization of the left matrix.
    left_c: Vec<f64>,
    left_inv: Vec<f64>,
}

impl CnStepper {
    fn new(grid: &SpatialGrid, potential: &Potential, cfg: &DeformationConfig, dtau: f64) -> Self {
        let n = grid.len();
        let h2 = grid.spacing() * grid.spacing();
        let hbar = cfg.hbar;
        let coupling = 0.25 * dtau * hbar / h2;
        let diag: Vec<f64> = grid
            .points()
            .iter()
            .map(|&x| 0.5 * dtau * (hbar / h2 + potential.value(x) / hbar))
            .collect();
        let left_diag: Vec<f64> = diag.iter().map(|d| 1.0 + d).collect();
        let right_diag: Vec<f64> = diag.iter().map(|d| 1.0 - d).collect();
        let mut left_c = vec![0.0; n];
        let mut left_inv = vec![0.0; n];
        let mut denom = left_diag[0];
        left_inv[0] = 1.0 / denom;
        left_c[0] = -coupling / denom;
        for i in 1..n {
            denom = left_diag[i] + coupling * left_c[i - 1];
            left_inv[i] = 1.0 / denom;
            left_c[i] = -coupling / denom;
        }
        Self {
            n,
            off: coupling,
            right_diag,
            left_c,
            left_inv,
        }
    }

    /// Largest stable substep for the given grid and potential.
    fn max_substep(grid: &SpatialGrid, potential: &Potential, cfg: &DeformationConfig) -> f64 {
        let h2 = grid.spacing() * grid.spacing();
        let vmax = potential.max_on(grid).max(0.0);
        let vmin = potential.lower_bound(grid).min(0.0);
        let mut dtau = 2.0 / (cfg.hbar / h2 + vmax / cfg.hbar);
        if vmin < 0.0 {
            dtau = dtau.min(cfg.hbar / -vmin);
        }
        dtau
    }

    /// One substep in place; `scratch` has length `n`.
    fn step(&self, v: &mut [f64], scratch: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let left = if i > 0 { v[i - 1] } else { 0.0 };
            let right = if i + 1 < n { v[i + 1] } else { 0.0 };
            scratch[i] = self.right_diag[i] * v[i] + self.off * (left + right);
        }
        // forward sweep: L y = rhs with sub-diagonal -off
        let mut prev = 0.0;
        for i in 0..n {
            let y = (scratch[i] + self.off * prev) * self.left_inv[i];
            scratch[i] = y;
            prev = y;
        }
        // back substitution
        v[n - 1] = scratch[n - 1];
        for i in (0..n - 1).rev() {
            v[i] = scratch[i] - self.left_c[i] * v[i + 1];
        }
    }
}

/// Crank-Nicolson kernel over `[tgrid.t_start, tgrid.t_end]`, taking the
/// same number of substeps in every slice of `tgrid`.
pub fn crank_nicolson_kernel(
    grid: &SpatialGrid,
    tgrid: &TimeGrid,
    potential: &Potential,
    cfg: &DeformationConfig,
) -> Result<PropagatorKernel> {
    let sub = cn_substeps(grid, potential, cfg, tgrid.step());
    let dtau = tgrid.step() / sub as f64;
    cn_kernel(
        grid,
        potential,
        cfg,
        tgrid.t_start(),
        tgrid.t_end(),
        dtau,
        sub * tgrid.n_steps(),
    )
}

fn cn_substeps(grid: &SpatialGrid, potential: &Potential, cfg: &DeformationConfig, span: f64) -> usize {
    let max = CnStepper::max_substep(grid, potential, cfg);
    ((span / max) * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

fn cn_kernel(
    grid: &SpatialGrid,
    potential: &Potential,
    cfg: &DeformationConfig,
    s: f64,
    u: f64,
    dtau: f64,
    steps: usize,
) -> Result<PropagatorKernel> {
    let n = grid.len();
    let stepper = CnStepper::new(grid, potential, cfg, dtau);
    let h = grid.spacing();
    let mut scratch = vec![0.0; n];
    let mut columns = vec![0.0; n * n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[j] = 1.0;
        let mut log_scale = 0.0;
        for _ in 0..steps {
            stepper.step(&mut col, &mut scratch);
            let m = col.iter().fold(0.0f64, |a, &b| a.max(b));
            if m > 0.0 && !(1e-100..=1e100).contains(&m) {
                col.iter_mut().for_each(|v| *v /= m);
                log_scale += m.ln();
            }
        }
        for i in 0..n {
            columns[j * n + i] = ln_or_neg_inf(col[i]) + log_scale - h.ln();
        }
    }
    // the step matrices are symmetric, so column j equals row j
    PropagatorKernel::from_log_entries(grid, s, u, KernelTag::CrankNicolson, columns)
}

/// Which construction a [`Propagator`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMethod {
    Gaussian,
    Mehler,
    CrankNicolson,
}

/// Builds kernels and propagates fields across a time grid.
#[derive(Debug, Clone)]
pub struct Propagator {
    grid: SpatialGrid,
    potential: Potential,
    cfg: DeformationConfig,
    method: KernelMethod,
}

impl Propagator {
    pub fn new(
        grid: &SpatialGrid,
        potential: &Potential,
        cfg: &DeformationConfig,
        method: KernelMethod,
    ) -> Result<Self> {
        match method {
            KernelMethod::Gaussian if !potential.is_free() => {
                return Err(Error::InvalidPotential(
                    "the Gaussian kernel requires the free potential".into(),
                ))
            }
            KernelMethod::Mehler if potential.harmonic_frequency().is_none() => {
                return Err(Error::InvalidPotential(
                    "the Mehler kernel requires a harmonic potential".into(),
                ))
            }
            _ => {}
        }
        Ok(Self {
            grid: grid.clone(),
            potential: potential.clone(),
            cfg: *cfg,
            method,
        })
    }

    /// Closed form when one exists, Crank-Nicolson otherwise.
    pub fn preferred(grid: &SpatialGrid, potential: &Potential, cfg: &DeformationConfig) -> Self {
        let method = if potential.is_free() {
            KernelMethod::Gaussian
        } else if potential.harmonic_frequency().is_some() {
            KernelMethod::Mehler
        } else {
            KernelMethod::CrankNicolson
        };
        Self {
            grid: grid.clone(),
            potential: potential.clone(),
            cfg: *cfg,
            method,
        }
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn cfg(&self) -> &DeformationConfig {
        &self.cfg
    }

    pub fn method(&self) -> KernelMethod {
        self.method
    }

    /// Kernel over `[s, u]`; `u == s` gives the discrete identity.
    pub fn kernel(&self, s: f64, u: f64) -> Result<PropagatorKernel> {
        if u == s {
            return Ok(PropagatorKernel::identity(&self.grid, s));
        }
        let tau = check_interval(s, u)?;
        match self.method {
            KernelMethod::Gaussian => {
                let var = self.cfg.hbar * tau;
                let logs = closed_form_log_entries(&self.grid, |x, z| log_gaussian(x - z, var));
                PropagatorKernel::from_log_entries(&self.grid, s, u, KernelTag::Gaussian, logs)
            }
            KernelMethod::Mehler => {
                let omega = self.potential.harmonic_frequency().unwrap_or_default();
                let c = MehlerCoefficients::new(omega, tau, self.cfg.hbar);
                let logs = closed_form_log_entries(&self.grid, |x, z| c.log_value(x, z));
                PropagatorKernel::from_log_entries(&self.grid, s, u, KernelTag::Mehler, logs)
            }
            KernelMethod::CrankNicolson => {
                let sub = cn_substeps(&self.grid, &self.potential, &self.cfg, tau);
                cn_kernel(&self.grid, &self.potential, &self.cfg, s, u, tau / sub as f64, sub)
            }
        }
    }

    /// Kernel over the whole of `tgrid`, consistent with
    /// [`Propagator::propagate_backward`] on the same grid.
    pub fn kernel_on(&self, tgrid: &TimeGrid) -> Result<PropagatorKernel> {
        match self.method {
            KernelMethod::CrankNicolson => crank_nicolson_kernel(&self.grid, tgrid, &self.potential, &self.cfg),
            _ => self.kernel(tgrid.t_start(), tgrid.t_end()),
        }
    }

    /// Kernel between two slices of `tgrid`.
    pub fn slice_kernel(&self, tgrid: &TimeGrid, from: usize, to: usize) -> Result<PropagatorKernel> {
        if to < from || to > tgrid.n_steps() {
            return Err(Error::Domain(format!("bad slice pair {from} -> {to}")));
        }
        let (s, u) = (tgrid.time(from), tgrid.time(to));
        match self.method {
            KernelMethod::CrankNicolson if from < to => {
                let sub = cn_substeps(&self.grid, &self.potential, &self.cfg, tgrid.step());
                let dtau = tgrid.step() / sub as f64;
                cn_kernel(&self.grid, &self.potential, &self.cfg, s, u, dtau, sub * (to - from))
            }
            _ => self.kernel(s, u),
        }
    }

    /// `log eta(., t_k) = log integral K(t_k, ., u, z) eta_u(z) dz` for every
    /// slice.
    pub fn propagate_backward(&self, tgrid: &TimeGrid, log_eta_u: &[f64]) -> Result<GridField> {
        self.propagate(tgrid, log_eta_u, true)
    }

    /// `log eta*(., t_k) = log integral eta*_s(y) K(s, y, t_k, .) dy` for
    /// every slice.
    pub fn propagate_forward(&self, tgrid: &TimeGrid, log_eta_star_s: &[f64]) -> Result<GridField> {
        self.propagate(tgrid, log_eta_star_s, false)
    }

    fn propagate(&self, tgrid: &TimeGrid, log_boundary: &[f64], backward: bool) -> Result<GridField> {
        let n = self.grid.len();
        if log_boundary.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                found: log_boundary.len(),
            });
        }
        let m = tgrid.n_steps();
        let mut slices = vec![Vec::new(); m + 1];
        let (boundary_slice, order): (usize, Vec<usize>) = if backward {
            (m, (0..m).rev().collect())
        } else {
            (0, (1..=m).collect())
        };
        slices[boundary_slice] = log_boundary.to_vec();
        match self.method {
            KernelMethod::CrankNicolson => {
                self.propagate_cn(tgrid, log_boundary, &order, &mut slices)?;
            }
            _ => {
                let boundary_time = tgrid.time(boundary_slice);
                for &k in &order {
                    let t = tgrid.time(k);
                    slices[k] = if backward {
                        self.kernel(t, boundary_time)?.log_apply_forward(log_boundary)?
                    } else {
                        self.kernel(boundary_time, t)?.log_apply_backward(log_boundary)?
                    };
                }
            }
        }
        GridField::from_slices(&self.grid, tgrid, slices)
    }

    fn propagate_cn(
        &self,
        tgrid: &TimeGrid,
        log_boundary: &[f64],
        order: &[usize],
        slices: &mut [Vec<f64>],
    ) -> Result<()> {
        let n = self.grid.len();
        let sub = cn_substeps(&self.grid, &self.potential, &self.cfg, tgrid.step());
        let stepper = CnStepper::new(&self.grid, &self.potential, &self.cfg, tgrid.step() / sub as f64);
        let h = self.grid.spacing();
        let max = log_boundary.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if !max.is_finite() {
            return Err(Error::InvalidField("boundary field is identically zero".into()));
        }
        // K W f = P^N (W / h) f
        let mut v: Vec<f64> = log_boundary
            .iter()
            .enumerate()
            .map(|(i, &l)| (l - max).exp() * self.grid.weight(i) / h)
            .collect();
        let mut log_scale = max;
        let mut scratch = vec![0.0; n];
        for &k in order {
            for _ in 0..sub {
                stepper.step(&mut v, &mut scratch);
            }
            let m = v.iter().fold(0.0f64, |a, &b| a.max(b));
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::NonPositiveField {
                    field: "propagated",
                    node: 0,
                });
            }
            v.iter_mut().for_each(|x| *x /= m);
            log_scale += m.ln();
            slices[k] = v.iter().map(|&x| ln_or_neg_inf(x) + log_scale).collect();
        }
        Ok(())
    }
}

/// Number of bridge steps used by the Feynman-Kac estimator over `tau`.
pub fn feynman_kac_steps(tau: f64) -> usize {
    ((1024.0 * tau).ceil() as usize).max(256)
}

/// `exp(-(1/hbar) integral V(omega(tau)) d tau)` along one Brownian bridge
/// from `(s, x)` to `(u, z)` with diffusion `hbar`, trapezoid in time.
pub fn feynman_kac_weight(
    s: f64,
    x: f64,
    u: f64,
    z: f64,
    potential: &Potential,
    cfg: &DeformationConfig,
    steps: usize,
    rng: &mut PathRng,
) -> f64 {
    let tau = u - s;
    let dt = tau / steps as f64;
    let mut pos = x;
    let mut integral = 0.5 * potential.value(x);
    for k in 0..steps - 1 {
        let remaining = tau - k as f64 * dt;
        let mean = pos + (z - pos) * dt / remaining;
        let var = cfg.hbar * dt * (remaining - dt) / remaining;
        pos = mean + var.sqrt() * standard_normal(rng);
        integral += potential.value(pos);
    }
    integral += 0.5 * potential.value(z);
    (-(integral * dt) / cfg.hbar).exp()
}

/// Monte Carlo Feynman-Kac estimate of `h(s, x, u, z)` with its standard
/// error. Path `p` uses stream `p` of `seed`.
pub fn feynman_kac_kernel_estimate(
    s: f64,
    x: f64,
    u: f64,
    z: f64,
    potential: &Potential,
    cfg: &DeformationConfig,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate> {
    if n_paths < 1000 {
        return Err(Error::Domain(format!(
            "Feynman-Kac estimation needs at least 1000 paths, got {n_paths}"
        )));
    }
    let g = gaussian_kernel(s, x, u, z, cfg)?;
    if potential.is_free() {
        return Ok(Estimate {
            value: g,
            se: 0.0,
            n: n_paths,
        });
    }
    let steps = feynman_kac_steps(u - s);
    let mut acc = Welford::default();
    for p in 0..n_paths {
        let mut rng = path_rng(seed, p as u64);
        acc.push(feynman_kac_weight(s, x, u, z, potential, cfg, steps, &mut rng));
    }
    let e = acc.estimate();
    Ok(Estimate {
        value: g * e.value,
        se: g * e.se,
        n: n_paths,
    })
}

/// Merges per-path weights into a kernel estimate; used by parallel drivers.
pub fn feynman_kac_from_weights(
    s: f64,
    x: f64,
    u: f64,
    z: f64,
    cfg: &DeformationConfig,
    weights: &[f64],
) -> Result<Estimate> {
    let g = gaussian_kernel(s, x, u, z, cfg)?;
    let e = Estimate::from_samples(weights);
    Ok(Estimate {
        value: g * e.value,
        se: g * e.se,
        n: e.n,
    })
}
