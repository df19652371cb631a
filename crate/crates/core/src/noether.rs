//! Symmetry triples `(T, Q, phi)`, their determining equations, Noether
//! charges `N = B Q - h T - phi`, Monte Carlo martingale tests and the
//! scaling symmetry of the free heat equation with its Doob transform.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::dynamics::PathEnsemble;
use crate::error::{Error, Result};
use crate::expr::{add, mul, Bindings, Expr};
use crate::field::{first_derivative, AnalyticField, GridField, Jet, JetField, JetTable, ResidualField, Window};
use crate::grid::{SpatialGrid, TimeGrid};
use crate::kernel::{log_gaussian_kernel, KernelMethod};
use crate::numerics::{cubic_interpolate, log_sum_exp_slice};
use crate::potential::Potential;
use crate::schroedinger::SchroedingerPair;
use crate::stats::{ols_slope_weights, Welford};
use crate::variational::{generator_apply, EnergyField};

/// Generator coefficients `T(t)`, `Q(x, t)`, `phi(x, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryTriple {
    pub name: String,
    pub t: Expr,
    pub q: Expr,
    pub phi: Expr,
}

impl SymmetryTriple {
    pub fn new(name: &str, t: Expr, q: Expr, phi: Expr) -> Result<Self> {
        if t.depends_on("x") {
            return Err(Error::InvalidTriple(format!("{name}: T must not depend on x")));
        }
        Ok(Self {
            name: name.to_string(),
            t,
            q,
            phi,
        })
    }

    /// Parses the three coefficients from expression strings.
    pub fn parse(name: &str, t: &str, q: &str, phi: &str) -> Result<Self> {
        Self::new(name, Expr::parse(t)?, Expr::parse(q)?, Expr::parse(phi)?)
    }

    /// Time translation, space translation, Galilean boost and scaling.
    pub fn catalog() -> Vec<Self> {
        [
            ("energy", "1", "0", "0"),
            ("space_translation", "0", "1", "0"),
            ("boost", "0", "t", "x"),
            ("scaling", "2*t", "x", "0"),
        ]
        .iter()
        .map(|(n, t, q, phi)| Self::parse(n, t, q, phi).expect("catalog expressions parse"))
        .collect()
    }

    pub fn from_catalog(name: &str) -> Option<Self> {
        Self::catalog().into_iter().find(|t| t.name == name)
    }

    /// `sum c_i (T_i, Q_i, phi_i)`.
    pub fn linear_combination(name: &str, terms: &[(f64, &SymmetryTriple)]) -> Result<Self> {
        let combine = |pick: fn(&SymmetryTriple) -> &Expr| {
            terms.iter().fold(Expr::num(0.0), |acc, (c, tr)| {
                add(acc, mul(Expr::num(*c), pick(tr).clone()))
            })
        };
        Self::new(name, combine(|t| &t.t), combine(|t| &t.q), combine(|t| &t.phi))
    }

    fn fields(&self, grid: &SpatialGrid, tgrid: &TimeGrid, params: &Bindings) -> Result<[AnalyticField; 3]> {
        Ok([
            AnalyticField::new(grid, tgrid, self.t.clone(), params.clone())?,
            AnalyticField::new(grid, tgrid, self.q.clone(), params.clone())?,
            AnalyticField::new(grid, tgrid, self.phi.clone(), params.clone())?,
        ])
    }
}

/// Sup-norms of the determining equations on a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeterminingResidual {
    /// `dT/dt - 2 dQ/dx`.
    pub dilation: f64,
    /// `dQ/dt - dphi/dx`.
    pub momentum: f64,
    /// `dphi/dt + (hbar/2) phi_xx - (T' V + Q V_x + T V_t)`.
    pub gauge: f64,
    /// `dT/dx`, which must vanish.
    pub time_only: f64,
}

impl DeterminingResidual {
    pub fn max(&self) -> f64 {
        self.dilation.max(self.momentum).max(self.gauge).max(self.time_only)
    }
}

/// Evaluates the determining equations with symbolic derivatives of the
/// triple at every grid node. `params` binds extra names such as `hbar`.
pub fn determining_residual(
    triple: &SymmetryTriple,
    grid: &SpatialGrid,
    tgrid: &TimeGrid,
    v: &Potential,
    hbar: f64,
    params: &Bindings,
) -> Result<DeterminingResidual> {
    let [t, q, phi] = triple.fields(grid, tgrid, params)?;
    let mut r = DeterminingResidual {
        dilation: 0.0,
        momentum: 0.0,
        gauge: 0.0,
        time_only: 0.0,
    };
    let worst = |acc: f64, v: f64| if v.is_finite() { acc.max(v.abs()) } else { f64::INFINITY };
    for k in 0..tgrid.n_slices() {
        for i in 0..grid.len() {
            let x = grid.point(i);
            let (tj, qj, pj) = (t.jet(i, k), q.jet(i, k), phi.jet(i, k));
            r.dilation = worst(r.dilation, tj.dt - 2.0 * qj.dx);
            r.momentum = worst(r.momentum, qj.dt - pj.dx);
            r.gauge = worst(
                r.gauge,
                pj.dt + 0.5 * hbar * pj.dxx - (tj.dt * v.value(x) + qj.value * v.gradient(x)),
            );
            r.time_only = worst(r.time_only, tj.dx);
        }
    }
    Ok(r)
}

/// Rejects a triple whose determining residual exceeds `tol`.
pub fn validate_triple(
    triple: &SymmetryTriple,
    grid: &SpatialGrid,
    tgrid: &TimeGrid,
    v: &Potential,
    hbar: f64,
    params: &Bindings,
    tol: f64,
) -> Result<DeterminingResidual> {
    let r = determining_residual(triple, grid, tgrid, v, hbar, params)?;
    if !(r.max() <= tol) {
        return Err(Error::InvalidTriple(format!(
            "{}: determining residual {:e} exceeds {tol:e}",
            triple.name,
            r.max()
        )));
    }
    Ok(r)
}

/// `N = B Q - h T - phi` with its derivative jets.
#[derive(Debug, Clone, PartialEq)]
pub struct NoetherCharge {
    name: String,
    provenance: Option<u64>,
    jets: JetTable,
    dense: GridField,
}

impl NoetherCharge {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn provenance(&self) -> Option<u64> {
        self.provenance
    }

    /// Values at every node, including those excluded from residual norms.
    pub fn values(&self) -> &GridField {
        &self.dense
    }

    pub fn value(&self, x: f64, t: f64) -> f64 {
        self.dense.interpolate(x, t)
    }

    /// The same charge plus `f(x, t)`, used to plant violations.
    pub fn shifted(&self, f: impl Fn(f64, f64) -> f64) -> Self {
        let grid = self.dense.grid().clone();
        let tgrid = self.dense.tgrid().clone();
        let mut out = self.clone();
        let plus = GridField::from_fn(&grid, &tgrid, f);
        out.dense = out.dense.zip_map(&plus, |a, b| a + b).expect("same grids");
        out.jets = JetTable::build(&[&self.jets, &plus], |i, k| {
            let (a, b) = (self.jets.jet(i, k), plus.jet(i, k));
            Jet {
                value: a.value + b.value,
                dx: a.dx + b.dx,
                dxx: a.dxx + b.dxx,
                dxxx: f64::NAN,
                dt: a.dt + b.dt,
                dxt: f64::NAN,
            }
        });
        out.name = format!("{}+shift", self.name);
        out
    }
}

impl JetField for NoetherCharge {
    fn grid(&self) -> &SpatialGrid {
        self.jets.grid()
    }

    fn tgrid(&self) -> &TimeGrid {
        self.jets.tgrid()
    }

    fn jet(&self, i: usize, k: usize) -> Jet {
        self.jets.jet(i, k)
    }

    fn is_valid(&self, i: usize, k: usize) -> bool {
        self.jets.is_valid(i, k)
    }
}

fn charge_jet(b: Jet, h: Jet, t: Jet, q: Jet, phi: Jet) -> Jet {
    Jet {
        value: b.value * q.value - h.value * t.value - phi.value,
        dx: b.dx * q.value + b.value * q.dx - h.dx * t.value - phi.dx,
        dxx: b.dxx * q.value + 2.0 * b.dx * q.dx + b.value * q.dxx - h.dxx * t.value - phi.dxx,
        dxxx: f64::NAN,
        dt: b.dt * q.value + b.value * q.dt - h.dt * t.value - h.value * t.dt - phi.dt,
        dxt: f64::NAN,
    }
}

/// Assembles `N` pointwise from the drift and its energy field.
pub fn noether_charge(
    triple: &SymmetryTriple,
    b: &dyn JetField,
    energy: &EnergyField,
    params: &Bindings,
    provenance: Option<u64>,
) -> Result<NoetherCharge> {
    let grid = b.grid().clone();
    let tgrid = b.tgrid().clone();
    let [t, q, phi] = triple.fields(&grid, &tgrid, params)?;
    let jets = JetTable::build(&[b, energy], |i, k| {
        charge_jet(b.jet(i, k), energy.jet(i, k), t.jet(i, k), q.jet(i, k), phi.jet(i, k))
    });
    let xs = grid.points();
    let slices = (0..tgrid.n_slices())
        .map(|k| {
            let time = tgrid.time(k);
            xs.iter()
                .enumerate()
                .map(|(i, &x)| {
                    b.jet(i, k).value * q.value_at(x, time)
                        - energy.values().get(i, k) * t.value_at(x, time)
                        - phi.value_at(x, time)
                })
                .collect()
        })
        .collect();
    let dense = GridField::from_slices(&grid, &tgrid, slices)?;
    if let Some(node) = dense.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("charge {} at node {node}", triple.name)));
    }
    Ok(NoetherCharge {
        name: triple.name.clone(),
        provenance,
        jets,
        dense,
    })
}

/// `D N`, zero for conserved charges up to differencing error.
pub fn field_martingale_residual(charge: &NoetherCharge, b: &dyn JetField, hbar: f64) -> ResidualField {
    generator_apply(charge, b, hbar)
}

/// Outcome of a regression-slope martingale test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MartingaleVerdict {
    pub slope: f64,
    pub se: f64,
    /// Deterministic allowance added to `3 SE`.
    pub floor: f64,
    pub n_paths: usize,
    pub passed: bool,
}

/// Per-path least-squares slope of `f(X(t_k), t_k)` against `t_k` over
/// slices `first..=last`, averaged across paths. Passes iff
/// `|slope| <= 3 SE + floor`.
pub fn martingale_test_fn(
    ensemble: &PathEnsemble,
    first: usize,
    last: usize,
    floor: f64,
    f: impl Fn(f64, f64) -> f64,
) -> Result<MartingaleVerdict> {
    let tgrid = ensemble.tgrid();
    if first >= last || last >= tgrid.n_slices() {
        return Err(Error::Domain(format!("bad slice range {first}..={last}")));
    }
    let times: Vec<f64> = (first..=last).map(|k| tgrid.time(k)).collect();
    let weights = ols_slope_weights(&times);
    let mut acc = Welford::default();
    for p in ensemble.paths() {
        let slope: f64 = (first..=last)
            .zip(&weights)
            .map(|(k, c)| c * f(p.positions[k], tgrid.time(k)))
            .sum();
        acc.push(slope);
    }
    let est = acc.estimate();
    let passed = est.value.abs() <= 3.0 * est.se + floor + 1e-12;
    Ok(MartingaleVerdict {
        slope: est.value,
        se: est.se,
        floor,
        n_paths: est.n,
        passed: passed && est.value.is_finite(),
    })
}

pub fn martingale_test(
    charge: &NoetherCharge,
    ensemble: &PathEnsemble,
    first: usize,
    last: usize,
    floor: f64,
) -> Result<MartingaleVerdict> {
    martingale_test_fn(ensemble, first, last, floor, |x, t| charge.value(x, t))
}

/// Which Schroedinger field a scaling acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaledField {
    /// `eta`, a backward heat solution; drift `B = hbar d log eta`.
    Eta,
    /// `eta*`, a forward heat solution; drift `B* = -hbar d log eta*`.
    EtaStar,
}

impl ScaledField {
    fn sign(self) -> f64 {
        match self {
            Self::Eta => 1.0,
            Self::EtaStar => -1.0,
        }
    }
}

/// `eta_a(x, t) = eta(e^-a x, e^-2a t)` on the largest sub-box whose
/// rescaled arguments stay on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingTransform {
    alpha: f64,
    hbar: f64,
    which: ScaledField,
    /// Original log field on the sub-box.
    log_base: GridField,
    log_scaled: GridField,
    /// Drift of the original field restricted to the sub-box, by the same
    /// stencil as the full-grid drift.
    drift: GridField,
    /// `e^-a B(e^-a x, e^-2a t)` by interpolation of the full-grid drift.
    rescaled_drift: GridField,
}

fn log_gradient(field: &GridField, scale: f64) -> GridField {
    let h = field.grid().spacing();
    let slices = (0..field.tgrid().n_slices())
        .map(|k| {
            first_derivative(field.slice(k), h)
                .into_iter()
                .map(|d| scale * d)
                .collect()
        })
        .collect();
    GridField::from_slices(field.grid(), field.tgrid(), slices).expect("same shape")
}

/// Cubic resampling of `f` at `(e^-a x_i, e^-2a t_k)` on the box.
fn resample(f: &GridField, alpha: f64, box_grid: &SpatialGrid, box_tgrid: &TimeGrid) -> GridField {
    let grid = f.grid();
    let tgrid = f.tgrid();
    let xs = box_grid.points();
    let positions: Vec<f64> = xs.iter().map(|x| grid.fractional_index((-alpha).exp() * x)).collect();
    // rows[k][i]: value at (e^-a x_i, t_k)
    let rows: Vec<Vec<f64>> = (0..tgrid.n_slices())
        .map(|k| positions.iter().map(|&p| cubic_interpolate(f.slice(k), p)).collect())
        .collect();
    let mut column = vec![0.0; tgrid.n_slices()];
    let mut out = vec![vec![0.0; xs.len()]; box_tgrid.n_slices()];
    for i in 0..xs.len() {
        for (c, row) in column.iter_mut().zip(&rows) {
            *c = row[i];
        }
        for (k, slot) in out.iter_mut().enumerate() {
            let t = (-2.0 * alpha).exp() * box_tgrid.time(k);
            slot[i] = cubic_interpolate(&column, tgrid.fractional_index(t));
        }
    }
    GridField::from_slices(box_grid, box_tgrid, out).expect("box shapes")
}

/// `log eta(x, t)` or `log eta*(x, t)` off the grid through the closed-form
/// free kernel.
fn kernel_log_value(pair: &SchroedingerPair, which: ScaledField, x: f64, t: f64) -> Result<f64> {
    let grid = pair.grid();
    let tgrid = pair.tgrid();
    let cfg = pair.propagator().cfg();
    let log_w = grid.log_weights();
    let zs = grid.points();
    match which {
        ScaledField::Eta => {
            let (u, boundary) = (tgrid.t_end(), pair.log_eta_u());
            if t >= u - 1e-12 {
                return Ok(cubic_interpolate(boundary, grid.fractional_index(x)));
            }
            let mut terms = Vec::with_capacity(zs.len());
            for ((z, lw), lb) in zs.iter().zip(&log_w).zip(boundary) {
                terms.push(log_gaussian_kernel(t, x, u, *z, cfg)? + lw + lb);
            }
            Ok(log_sum_exp_slice(&terms))
        }
        ScaledField::EtaStar => {
            let (s, boundary) = (tgrid.t_start(), pair.log_eta_star_s());
            if t <= s + 1e-12 {
                return Ok(cubic_interpolate(boundary, grid.fractional_index(x)));
            }
            let mut terms = Vec::with_capacity(zs.len());
            for ((y, lw), lb) in zs.iter().zip(&log_w).zip(boundary) {
                terms.push(lb + lw + log_gaussian_kernel(s, *y, t, x, cfg)?);
            }
            Ok(log_sum_exp_slice(&terms))
        }
    }
}

fn kernel_resample(
    pair: &SchroedingerPair,
    which: ScaledField,
    alpha: f64,
    box_grid: &SpatialGrid,
    box_tgrid: &TimeGrid,
) -> Result<GridField> {
    let (sx, st) = ((-alpha).exp(), (-2.0 * alpha).exp());
    let xs = box_grid.points();
    let slices = (0..box_tgrid.n_slices())
        .map(|k| {
            let t = st * box_tgrid.time(k);
            xs.iter().map(|x| kernel_log_value(pair, which, sx * x, t)).collect()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    GridField::from_slices(box_grid, box_tgrid, slices)
}

/// Builds the transform for a free pair. Nodes whose rescaled arguments
/// leave the grid are dropped; fewer than 5 x 3 remaining nodes is an error.
pub fn scaling_transform(pair: &SchroedingerPair, alpha: f64, which: ScaledField) -> Result<ScalingTransform> {
    if !pair.propagator().potential().is_free() {
        return Err(Error::InvalidPotential("the scaling symmetry needs V = 0".into()));
    }
    if !alpha.is_finite() {
        return Err(Error::Domain(format!("alpha must be finite, got {alpha}")));
    }
    let grid = pair.grid();
    let tgrid = pair.tgrid();
    let log_field = match which {
        ScaledField::Eta => pair.log_eta(),
        ScaledField::EtaStar => pair.log_eta_star(),
    };
    let sx = (-alpha).exp();
    let st = (-2.0 * alpha).exp();
    const SLACK: f64 = 1e-12;
    let inside_x: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            let x = sx * grid.point(i);
            x >= grid.x_min() - SLACK && x <= grid.x_max() + SLACK
        })
        .collect();
    let inside_t: Vec<usize> = (0..tgrid.n_slices())
        .filter(|&k| {
            let t = st * tgrid.time(k);
            t >= tgrid.t_start() - SLACK && t <= tgrid.t_end() + SLACK
        })
        .collect();
    let (Some(&i0), Some(&i1), Some(&k0), Some(&k1)) =
        (inside_x.first(), inside_x.last(), inside_t.first(), inside_t.last())
    else {
        return Err(Error::DomainExceeded(format!(
            "alpha {alpha} maps the whole grid outside itself"
        )));
    };
    if i1 - i0 + 1 < 5 || k1 - k0 + 1 < 3 {
        return Err(Error::DomainExceeded(format!(
            "alpha {alpha} leaves only {} x {} nodes on the grid",
            i1 - i0 + 1,
            k1 - k0 + 1
        )));
    }
    let box_grid = grid.subgrid(i0, i1)?;
    let box_tgrid = tgrid.subgrid(k0, k1)?;
    let log_base = log_field.sub_box(i0, i1, k0, k1)?;
    let log_scaled = if alpha == 0.0 {
        log_base.clone()
    } else if pair.propagator().method() == KernelMethod::Gaussian {
        kernel_resample(pair, which, alpha, &box_grid, &box_tgrid)?
    } else {
        resample(log_field, alpha, &box_grid, &box_tgrid)
    };
    let hbar = pair.hbar();
    let sign = which.sign();
    let full_drift = log_gradient(log_field, sign * hbar);
    let drift = full_drift.sub_box(i0, i1, k0, k1)?;
    let rescaled_drift = resample(&full_drift, alpha, &box_grid, &box_tgrid).map(|v| sx * v);
    Ok(ScalingTransform {
        alpha,
        hbar,
        which,
        log_base,
        log_scaled,
        drift,
        rescaled_drift,
    })
}

impl ScalingTransform {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn which(&self) -> ScaledField {
        self.which
    }

    pub fn grid(&self) -> &SpatialGrid {
        self.log_base.grid()
    }

    pub fn tgrid(&self) -> &TimeGrid {
        self.log_base.tgrid()
    }

    pub fn log_scaled(&self) -> &GridField {
        &self.log_scaled
    }

    /// `log h_a = log eta_a - log eta`.
    pub fn log_ratio(&self) -> GridField {
        self.log_scaled.zip_map(&self.log_base, |a, b| a - b).expect("same box")
    }

    /// `B^a = B + s hbar d log h_a` with `s = +1` for `eta`, `-1` for `eta*`.
    pub fn transformed_drift(&self) -> GridField {
        let grad = log_gradient(&self.log_ratio(), self.which.sign() * self.hbar);
        self.drift.zip_map(&grad, |b, g| b + g).expect("same box")
    }

    /// `e^-a B(e^-a x, e^-2a t)` from the untransformed drift.
    pub fn rescaled_drift(&self) -> &GridField {
        &self.rescaled_drift
    }

    /// Heat-equation residual of `eta_a` divided by `eta_a`:
    /// `L_t +- (hbar/2)(L_xx + L_x^2)` for `L = log eta_a`.
    pub fn heat_residual(&self) -> ResidualField {
        let l = &self.log_scaled;
        let s = self.which.sign();
        ResidualField::build(&[l], |i, k| {
            let j = l.jet(i, k);
            j.dt + s * 0.5 * self.hbar * (j.dxx + j.dx * j.dx)
        })
    }

    /// `(D h_a) / h_a` for `eta` (forward generator with `B`), or the
    /// backward generator with `B*` for `eta*`.
    pub fn martingale_residual(&self) -> ResidualField {
        let l = self.log_ratio();
        let b = &self.drift;
        let s = self.which.sign();
        ResidualField::build(&[&l, b], |i, k| {
            let j = l.jet(i, k);
            j.dt + b.get(i, k) * j.dx + s * 0.5 * self.hbar * (j.dxx + j.dx * j.dx)
        })
    }

    /// Sup-norm of `B^a - s hbar d log eta_a` over interior box nodes in
    /// `window`.
    pub fn doob_drift_check(&self, window: &Window) -> f64 {
        let direct = log_gradient(&self.log_scaled, self.which.sign() * self.hbar);
        interior_gap(&self.transformed_drift(), &direct, window)
    }

    /// Sup-norm of `B^a` against the chain-rule drift of the rescaled field.
    pub fn rescaled_drift_gap(&self, window: &Window) -> f64 {
        interior_gap(&self.transformed_drift(), &self.rescaled_drift, window)
    }
}

fn interior_gap(a: &GridField, b: &GridField, window: &Window) -> f64 {
    let grid = a.grid();
    let mut out = 0.0f64;
    for k in 0..a.tgrid().n_slices() {
        let t = a.tgrid().time(k);
        for i in 1..grid.len() - 1 {
            if window.contains(grid.point(i), t) {
                out = out.max((a.get(i, k) - b.get(i, k)).abs());
            }
        }
    }
    out
}

/// `e^a X(e^-2a t)` for an ensemble started at time 0: new times are
/// `e^2a t_k`, new positions `e^a X_k`.
pub fn scale_ensemble(ensemble: &PathEnsemble, alpha: f64) -> Result<PathEnsemble> {
    let tgrid = ensemble.tgrid();
    if tgrid.t_start() != 0.0 {
        return Err(Error::Domain("scaling acts on ensembles that start at t = 0".into()));
    }
    let st = (2.0 * alpha).exp();
    let scaled = TimeGrid::new(0.0, st * tgrid.t_end(), tgrid.n_steps())?;
    let paths = ensemble
        .paths()
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.positions.iter_mut().for_each(|x| *x *= alpha.exp());
            q
        })
        .collect();
    PathEnsemble::from_paths(
        scaled,
        ensemble.direction(),
        ensemble.seed(),
        st * ensemble.step(),
        paths,
    )
}
