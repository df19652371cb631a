//! Lagrangian layer of the Bernstein diffusion with `A = 0`: stochastic
//! Euler-Lagrange and Hamilton residuals, the energy martingale, the HJB
//! value function and Monte Carlo action functionals.
//!
//! Operators act on space-time fields:
//! `D f = f_t + B f_x + (hbar/2) f_xx` and
//! `D* f = f_t + B* f_x - (hbar/2) f_xx`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::dynamics::{
    simulate_forward, stratonovich_integral_with, time_integral, Direction, DriftField, InitialLaw, PathEnsemble,
    PathFunctional, SimulationOptions,
};
use crate::error::{Error, Result};
use crate::field::{first_derivative, GridField, Jet, JetField, JetTable, ResidualField};
use crate::grid::{SpatialGrid, TimeGrid};
use crate::numerics::cubic_interpolate;
use crate::potential::{DeformationConfig, Potential};
use crate::rng::path_rng;
use crate::schroedinger::SchroedingerPair;
use crate::stats::Estimate;

/// `(D f)(x, t)` on every node where both fields are valid.
pub fn generator_apply(f: &dyn JetField, b: &dyn JetField, hbar: f64) -> ResidualField {
    ResidualField::build(&[f, b], |i, k| {
        let fj = f.jet(i, k);
        fj.dt + b.jet(i, k).value * fj.dx + 0.5 * hbar * fj.dxx
    })
}

/// `(D* f)(x, t)` with the backward drift `B*`.
pub fn backward_generator_apply(f: &dyn JetField, bstar: &dyn JetField, hbar: f64) -> ResidualField {
    ResidualField::build(&[f, bstar], |i, k| {
        let fj = f.jet(i, k);
        fj.dt + bstar.jet(i, k).value * fj.dx - 0.5 * hbar * fj.dxx
    })
}

fn forward_acceleration(b: Jet, hbar: f64) -> f64 {
    b.dt + b.value * b.dx + 0.5 * hbar * b.dxx
}

fn backward_acceleration(bs: Jet, hbar: f64) -> f64 {
    bs.dt + bs.value * bs.dx - 0.5 * hbar * bs.dxx
}

/// `D B - dV/dx`.
pub fn sel_residual(b: &dyn JetField, v: &Potential, hbar: f64) -> ResidualField {
    let grid = b.grid().clone();
    ResidualField::build(&[b], |i, k| {
        forward_acceleration(b.jet(i, k), hbar) - v.gradient(grid.point(i))
    })
}

/// `D* B* - dV/dx`.
pub fn backward_sel_residual(bstar: &dyn JetField, v: &Potential, hbar: f64) -> ResidualField {
    let grid = bstar.grid().clone();
    ResidualField::build(&[bstar], |i, k| {
        backward_acceleration(bstar.jet(i, k), hbar) - v.gradient(grid.point(i))
    })
}

/// `(D B + D* B*) / 2 - dV/dx`.
pub fn symmetric_el_residual(b: &dyn JetField, bstar: &dyn JetField, v: &Potential, hbar: f64) -> ResidualField {
    let grid = b.grid().clone();
    ResidualField::build(&[b, bstar], |i, k| {
        0.5 * (forward_acceleration(b.jet(i, k), hbar) + backward_acceleration(bstar.jet(i, k), hbar))
            - v.gradient(grid.point(i))
    })
}

/// Residuals of the stochastic Hamilton equations with `H = P^2/2 - V`.
#[derive(Debug, Clone, PartialEq)]
pub struct SheResidual {
    /// `D X - dH/dP = B - P`.
    pub position: ResidualField,
    /// `D P + dH/dX = D P - dV/dx`.
    pub momentum: ResidualField,
}

/// Momentum field `P = B`.
pub fn momentum_field(b: &DriftField) -> GridField {
    b.field().clone()
}

pub fn she_residual(b: &dyn JetField, v: &Potential, hbar: f64) -> SheResidual {
    let p = b;
    SheResidual {
        position: ResidualField::build(&[b, p], |i, k| b.jet(i, k).value - p.jet(i, k).value),
        momentum: sel_residual(p, v, hbar),
    }
}

fn energy_jet(b: Jet, x: f64, v: &Potential, hbar: f64) -> Jet {
    Jet {
        value: 0.5 * b.value * b.value + 0.5 * hbar * b.dx - v.value(x),
        dx: b.value * b.dx + 0.5 * hbar * b.dxx - v.gradient(x),
        dxx: b.dx * b.dx + b.value * b.dxx + 0.5 * hbar * b.dxxx - v.curvature(x),
        dxxx: f64::NAN,
        dt: b.value * b.dt + 0.5 * hbar * b.dxt,
        dxt: f64::NAN,
    }
}

/// `h = B^2/2 + (hbar/2) dB/dx - V`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyField {
    jets: JetTable,
    dense: GridField,
}

impl EnergyField {
    pub fn new(b: &dyn JetField, v: &Potential, hbar: f64) -> Self {
        let grid = b.grid().clone();
        let tgrid = b.tgrid().clone();
        let jets = JetTable::build(&[b], |i, k| energy_jet(b.jet(i, k), grid.point(i), v, hbar));
        let n = grid.len();
        let slices = (0..tgrid.n_slices())
            .map(|k| {
                (0..n)
                    .map(|i| energy_jet(b.jet(i, k), grid.point(i), v, hbar).value)
                    .collect()
            })
            .collect();
        let dense = GridField::from_slices(&grid, &tgrid, slices).expect("shapes follow the drift");
        Self { jets, dense }
    }

    /// Values at every node, including those excluded from residual norms.
    pub fn values(&self) -> &GridField {
        &self.dense
    }

    pub fn value(&self, x: f64, t: f64) -> f64 {
        self.dense.interpolate(x, t)
    }
}

impl JetField for EnergyField {
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

pub fn energy_field(b: &dyn JetField, v: &Potential, hbar: f64) -> EnergyField {
    EnergyField::new(b, v, hbar)
}

/// `D h`, which vanishes for extremal drifts and static potentials.
pub fn energy_martingale_residual(b: &dyn JetField, v: &Potential, hbar: f64) -> ResidualField {
    let h = EnergyField::new(b, v, hbar);
    generator_apply(&h, b, hbar)
}

/// `S_t - S_x^2/2 + (hbar/2) S_xx + V`.
pub fn hjb_residual(s: &dyn JetField, v: &Potential, hbar: f64) -> ResidualField {
    let grid = s.grid().clone();
    ResidualField::build(&[s], |i, k| {
        let j = s.jet(i, k);
        j.dt - 0.5 * j.dx * j.dx + 0.5 * hbar * j.dxx + v.value(grid.point(i))
    })
}

/// Value function `S = -hbar log eta` with its HJB residual.
#[derive(Debug, Clone, PartialEq)]
pub struct HjbSolution {
    value: GridField,
    residual: ResidualField,
    hbar: f64,
    provenance: Option<u64>,
}

impl HjbSolution {
    pub fn value(&self) -> &GridField {
        &self.value
    }

    pub fn residual(&self) -> &ResidualField {
        &self.residual
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    /// `S(x, t)`, cubic in `x` on slice `k`.
    pub fn value_at(&self, x: f64, k: usize) -> f64 {
        cubic_interpolate(self.value.slice(k), self.value.grid().fractional_index(x))
    }

    /// Optimal Markov control `B = -dS/dx`.
    pub fn optimal_drift(&self) -> Result<DriftField> {
        let h = self.value.grid().spacing();
        let slices = (0..self.value.tgrid().n_slices())
            .map(|k| {
                first_derivative(self.value.slice(k), h)
                    .into_iter()
                    .map(|d| -d)
                    .collect()
            })
            .collect();
        let field = GridField::from_slices(self.value.grid(), self.value.tgrid(), slices)?;
        DriftField::new(Direction::Forward, field, self.hbar, self.provenance)
    }
}

pub fn hjb_from_eta(pair: &SchroedingerPair) -> Result<HjbSolution> {
    let log_eta = pair.log_eta();
    if let Some(node) = log_eta.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonPositiveField { field: "eta", node });
    }
    let hbar = pair.hbar();
    let value = log_eta.map(|l| -hbar * l);
    let residual = hjb_residual(&value, pair.propagator().potential(), hbar);
    Ok(HjbSolution {
        value,
        residual,
        hbar,
        provenance: Some(pair.id()),
    })
}

/// `d/dx (HJB residual) + SEL residual`, zero up to differencing error.
pub fn hjb_gradient_residual(hjb: &HjbSolution, b: &dyn JetField, v: &Potential) -> Result<ResidualField> {
    let sel = sel_residual(b, v, hjb.hbar);
    let grad = ResidualField::build(&[hjb.residual(), b], |i, k| hjb.residual().jet(i, k).dx);
    grad.zip_map(&sel, |g, s| g + s)
}

/// Bolza problem `J = E[ integral (B^2/2 + V) dt + S_u(X(u)) ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianSpec {
    grid: SpatialGrid,
    potential: Potential,
    terminal_cost: Vec<f64>,
    hbar: f64,
}

impl LagrangianSpec {
    pub fn new(
        grid: &SpatialGrid,
        potential: Potential,
        terminal_cost: Vec<f64>,
        cfg: &DeformationConfig,
    ) -> Result<Self> {
        if terminal_cost.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.len(),
                found: terminal_cost.len(),
            });
        }
        if let Some(i) = terminal_cost.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("terminal cost at node {i}")));
        }
        if !potential.lower_bound(grid).is_finite() {
            return Err(Error::InvalidPotential("potential must be bounded below".into()));
        }
        Ok(Self {
            grid: grid.clone(),
            potential,
            terminal_cost,
            hbar: cfg.hbar,
        })
    }

    /// Terminal cost `S(., u)` of a value function.
    pub fn from_hjb(hjb: &HjbSolution, potential: Potential, cfg: &DeformationConfig) -> Result<Self> {
        let last = hjb.value().tgrid().n_steps();
        Self::new(hjb.value().grid(), potential, hjb.value().slice(last).to_vec(), cfg)
    }

    pub fn without_terminal_cost(&self) -> Self {
        Self {
            terminal_cost: alloc::vec![0.0; self.grid.len()],
            ..self.clone()
        }
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn terminal_cost(&self, x: f64) -> f64 {
        cubic_interpolate(&self.terminal_cost, self.grid.fractional_index(x))
    }
}

fn with_terminal(running: PathFunctional, ensemble: &PathEnsemble, spec: &LagrangianSpec) -> PathFunctional {
    let last = ensemble.tgrid().n_steps();
    PathFunctional::from_values(
        running
            .per_path
            .iter()
            .zip(ensemble.paths())
            .map(|(r, p)| r + spec.terminal_cost(p.positions[last]))
            .collect(),
    )
}

/// Per-path `integral (B^2/2 + V) dt + S_u(X(u))` along a forward ensemble.
pub fn action_estimate(ensemble: &PathEnsemble, b: &DriftField, spec: &LagrangianSpec) -> PathFunctional {
    let running = time_integral(ensemble, |x, t| {
        let v = b.value(x, t);
        0.5 * v * v + spec.potential.value(x)
    });
    with_terminal(running, ensemble, spec)
}

/// Poincare-Cartan form: `integral P o dX - integral h dt + S_u(X(u))` with `P = B`.
pub fn action_pc_estimate(
    ensemble: &PathEnsemble,
    b: &DriftField,
    energy: &EnergyField,
    spec: &LagrangianSpec,
) -> PathFunctional {
    let momentum = stratonovich_integral_with(ensemble, |x, t| b.value(x, t));
    let energy_integral = time_integral(ensemble, |x, t| energy.value(x, t));
    with_terminal(momentum.minus(&energy_integral), ensemble, spec)
}

/// Bounded smooth shift added to the optimal drift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriftShift {
    Constant(f64),
    Gaussian { amplitude: f64, center: f64, width: f64 },
}

impl DriftShift {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Self::Constant(c) => c,
            Self::Gaussian {
                amplitude,
                center,
                width,
            } => {
                let z = (x - center) / width;
                amplitude * (-0.5 * z * z).exp()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub id: usize,
    pub shift: DriftShift,
}

impl Perturbation {
    /// `n` perturbations alternating constants and Gaussian bumps.
    pub fn random_suite(n: usize, seed: u64) -> Vec<Self> {
        let mut rng = path_rng(seed, u64::MAX);
        (0..n)
            .map(|id| {
                let shift = if id % 2 == 0 {
                    DriftShift::Constant(rng.random_range(-1.0..1.0))
                } else {
                    DriftShift::Gaussian {
                        amplitude: rng.random_range(-1.0..1.0),
                        center: rng.random_range(-1.5..1.5),
                        width: rng.random_range(0.3..1.5),
                    }
                };
                Self { id, shift }
            })
            .collect()
    }
}

/// One line of a value-bound report.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueBoundRow {
    /// `None` for the optimal drift.
    pub perturbation: Option<Perturbation>,
    pub j_hat: Estimate,
    pub value: f64,
    pub passed: bool,
}

impl ValueBoundRow {
    pub fn label(&self) -> String {
        match self.perturbation {
            Some(p) => format!("{}", p.id),
            None => String::from("optimal"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueBoundReport {
    pub start: f64,
    pub rows: Vec<ValueBoundRow>,
}

impl ValueBoundReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn violations(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.perturbation.is_some() && !r.passed)
            .count()
    }
}

/// Checks `S(x0, s) <= J` for perturbed drifts and equality at the optimum,
/// each within three standard errors, with paths started at `x0`.
pub fn verify_value_bound(
    spec: &LagrangianSpec,
    hjb: &HjbSolution,
    perturbations: &[Perturbation],
    x0: f64,
    opts: &SimulationOptions,
) -> Result<ValueBoundReport> {
    verify_value_bound_with(spec, hjb, perturbations, x0, opts, &simulate_forward)
}

/// [`verify_value_bound`] with a caller-supplied forward simulator, e.g. a
/// parallel one. It must return the same ensemble as [`simulate_forward`].
pub fn verify_value_bound_with(
    spec: &LagrangianSpec,
    hjb: &HjbSolution,
    perturbations: &[Perturbation],
    x0: f64,
    opts: &SimulationOptions,
    simulate: &dyn Fn(&DriftField, &InitialLaw, &SimulationOptions) -> Result<PathEnsemble>,
) -> Result<ValueBoundReport> {
    let optimal = hjb.optimal_drift()?;
    let value = hjb.value_at(x0, 0);
    let law = InitialLaw::Point(x0);
    let run = |drift: &DriftField| -> Result<Estimate> {
        let ens = simulate(drift, &law, opts)?;
        ens.check_clamping()?;
        Ok(action_estimate(&ens, drift, spec).estimate)
    };
    let j = run(&optimal)?;
    let mut rows = alloc::vec![ValueBoundRow {
        perturbation: None,
        j_hat: j,
        value,
        passed: j.within(value, 3.0),
    }];
    for p in perturbations {
        let drift = optimal.perturbed(|x, _| p.shift.value(x))?;
        let j = run(&drift)?;
        rows.push(ValueBoundRow {
            perturbation: Some(*p),
            j_hat: j,
            value,
            passed: j.value >= value - 3.0 * j.se,
        });
    }
    Ok(ValueBoundReport { start: x0, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{backward_drift, forward_drift};
    use crate::expr::Bindings;
    use crate::field::{observed_order, AnalyticField, Window};
    use crate::kernel::Propagator;
    use crate::schroedinger::{solve_schroedinger_system, BoundaryDensities, DensitySpec, SolverOptions};

    fn grids() -> (SpatialGrid, TimeGrid) {
        (
            SpatialGrid::new(-3.0, 3.0, 61).unwrap(),
            TimeGrid::new(0.0, 1.0, 10).unwrap(),
        )
    }

    fn analytic(src: &str, params: Bindings) -> AnalyticField {
        let (g, tg) = grids();
        AnalyticField::parse(&g, &tg, src, params).unwrap()
    }

    #[test]
    fn generator_on_simple_functions() {
        let b = analytic("sin(x) + t", Bindings::new());
        let f = analytic("x", Bindings::new());
        let r = generator_apply(&f, &b, 0.7);
        for (i, k) in [(3, 2), (30, 5), (50, 9)] {
            assert!((r.field().get(i, k) - b.jet(i, k).value).abs() < 1e-14);
        }
        let zero = analytic("0", Bindings::new());
        let sq = analytic("x^2", Bindings::new());
        let r = generator_apply(&sq, &zero, 0.7);
        assert!(r.field().values().iter().all(|v| (v - 0.7).abs() < 1e-14));
    }

    #[test]
    fn closed_form_extremals_have_zero_residuals() {
        let hbar = 0.8;
        let bridge = analytic("(z - x) / (u - t)", Bindings::new().with("z", 1.0).with("u", 1.5));
        let bridge_star = analytic("(x - a) / (t - s)", Bindings::new().with("a", 0.0).with("s", -0.5));
        let free = Potential::free();
        let harmonic = Potential::harmonic(1.3).unwrap();
        let osc = analytic("-w * x", Bindings::new().with("w", 1.3));
        let osc_star = analytic("w * x", Bindings::new().with("w", 1.3));
        let wiener = analytic("0", Bindings::new());
        let cases: [(&AnalyticField, &AnalyticField, &Potential); 3] = [
            (&wiener, &wiener, &free),
            (&bridge, &bridge_star, &free),
            (&osc, &osc_star, &harmonic),
        ];
        for (b, bs, v) in cases {
            assert!(sel_residual(b, v, hbar).sup_norm() < 1e-10);
            assert!(backward_sel_residual(bs, v, hbar).sup_norm() < 1e-10);
            assert!(symmetric_el_residual(b, bs, v, hbar).sup_norm() < 1e-10);
            let she = she_residual(b, v, hbar);
            assert_eq!(she.position.sup_norm(), 0.0);
            assert!(she.momentum.sup_norm() < 1e-10);
            assert!(energy_martingale_residual(b, v, hbar).sup_norm() < 1e-10);
        }
        let h = EnergyField::new(&osc, &harmonic, hbar);
        assert!(h.values().values().iter().all(|v| (v + 0.5 * hbar * 1.3).abs() < 1e-12));
        let example_one = analytic("h * x / (q + h * t)", Bindings::new().with("h", hbar).with("q", 0.5));
        assert!(backward_sel_residual(&example_one, &free, hbar).sup_norm() < 1e-10);
    }

    #[test]
    fn bridge_energy_closed_form() {
        let hbar = 0.6;
        let bridge = analytic("(z - x) / (u - t)", Bindings::new().with("z", 1.0).with("u", 1.5));
        let h = EnergyField::new(&bridge, &Potential::free(), hbar);
        let (g, tg) = grids();
        for k in 0..tg.n_slices() {
            let t = tg.time(k);
            for i in (0..g.len()).step_by(7) {
                let b = (1.0 - g.point(i)) / (1.5 - t);
                let exact = 0.5 * b * b - 0.5 * hbar / (1.5 - t);
                assert!((h.values().get(i, k) - exact).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corrupted_drift_breaks_the_law() {
        let b = analytic("-w * x + 0.3 * sin(x)", Bindings::new().with("w", 1.0));
        let r = sel_residual(&b, &Potential::harmonic(1.0).unwrap(), 1.0);
        assert!(r.sup_norm() > 0.1);
    }

    #[test]
    fn analytic_value_functions() {
        let hbar = 0.9;
        let zero = analytic("0", Bindings::new());
        assert_eq!(hjb_residual(&zero, &Potential::free(), hbar).sup_norm(), 0.0);
        let s = analytic(
            "w * x^2 / 2 - h * w * t / 2",
            Bindings::new().with("w", 1.2).with("h", hbar),
        );
        assert!(hjb_residual(&s, &Potential::harmonic(1.2).unwrap(), hbar).sup_norm() < 1e-12);
    }

    fn harmonic_pair(n: usize, m: usize, omega: f64, hbar: f64, terminal: DensitySpec) -> SchroedingerPair {
        let grid = SpatialGrid::new(-6.0, 6.0, n).unwrap();
        let tgrid = TimeGrid::new(0.0, 1.0, m).unwrap();
        let cfg = DeformationConfig::new(hbar).unwrap();
        let prop = Propagator::preferred(&grid, &Potential::harmonic(omega).unwrap(), &cfg);
        let ground = DensitySpec::Gaussian {
            mean: 0.0,
            std: (hbar / (2.0 * omega)).sqrt(),
        };
        let bd = BoundaryDensities::from_specs(&grid, &ground, &terminal).unwrap();
        solve_schroedinger_system(&prop, &tgrid, &bd, &SolverOptions::default()).unwrap()
    }

    #[test]
    fn stationary_harmonic_pair() {
        let (omega, hbar) = (1.0, 1.0);
        let ground = DensitySpec::Gaussian {
            mean: 0.0,
            std: (0.5f64).sqrt(),
        };
        let pair = harmonic_pair(241, 20, omega, hbar, ground);
        let b = forward_drift(&pair).unwrap();
        let bs = backward_drift(&pair).unwrap();
        let g = pair.grid().clone();
        for k in [0, 10, 20] {
            for i in (80..=160).step_by(10) {
                assert!((b.field().get(i, k) + omega * g.point(i)).abs() < 1e-6);
                assert!((bs.field().get(i, k) - omega * g.point(i)).abs() < 1e-6);
            }
        }
        let v = pair.propagator().potential().clone();
        let inner = Window::new(-3.0, 3.0, 0.0, 1.0);
        assert!(sel_residual(b.field(), &v, hbar).sup_norm_in(&inner) < 1e-6);
        let hjb = hjb_from_eta(&pair).unwrap();
        assert!(hjb.residual().sup_norm_in(&inner) < 1e-6);
        let opt = hjb.optimal_drift().unwrap();
        for i in 80..=160 {
            assert!((opt.field().get(i, 5) - b.field().get(i, 5)).abs() < 1e-10);
        }
        let h = EnergyField::new(b.field(), &v, hbar);
        assert!((h.values().get(120, 10) + 0.5 * hbar * omega).abs() < 1e-6);
    }

    fn mixture() -> DensitySpec {
        DensitySpec::Mixture(alloc::vec![(0.6, -0.7, 0.5), (0.4, 0.9, 0.6)])
    }

    #[test]
    fn residuals_converge_at_second_order() {
        let (omega, hbar) = (1.0, 1.0);
        let window = Window::new(-1.5, 1.5, 0.25, 0.75);
        let mut sel = Vec::new();
        let mut sym = Vec::new();
        let mut hjb = Vec::new();
        let mut grad = Vec::new();
        let mut mart = Vec::new();
        for (n, m) in [(121, 8), (241, 16), (481, 32)] {
            let pair = harmonic_pair(n, m, omega, hbar, mixture());
            let v = pair.propagator().potential().clone();
            let b = forward_drift(&pair).unwrap();
            let bs = backward_drift(&pair).unwrap();
            sel.push(sel_residual(b.field(), &v, hbar).sup_norm_in(&window));
            sym.push(symmetric_el_residual(b.field(), bs.field(), &v, hbar).sup_norm_in(&window));
            let s = hjb_from_eta(&pair).unwrap();
            hjb.push(s.residual().sup_norm_in(&window));
            grad.push(hjb_gradient_residual(&s, b.field(), &v).unwrap().sup_norm_in(&window));
            mart.push(energy_martingale_residual(b.field(), &v, hbar).sup_norm_in(&window));
        }
        for (name, r) in [
            ("sel", &sel),
            ("sym", &sym),
            ("hjb", &hjb),
            ("grad", &grad),
            ("mart", &mart),
        ] {
            let p1 = observed_order(r[0], r[1]);
            let p2 = observed_order(r[1], r[2]);
            assert!(p1 > 1.8 && p2 > 1.8, "{name}: {r:?} orders {p1} {p2}");
        }
    }

    #[test]
    fn perturbation_suite_is_reproducible() {
        let a = Perturbation::random_suite(20, 11);
        assert_eq!(a, Perturbation::random_suite(20, 11));
        assert_ne!(a, Perturbation::random_suite(20, 12));
        assert_eq!(a.len(), 20);
        assert!(a.iter().all(|p| p.shift.value(0.3).abs() <= 1.0));
    }

    #[test]
    fn value_bound_on_the_oscillator() {
        let (omega, hbar) = (1.0, 1.0);
        let ground = DensitySpec::Gaussian {
            mean: 0.0,
            std: (0.5f64).sqrt(),
        };
        let pair = harmonic_pair(241, 20, omega, hbar, ground);
        let cfg = DeformationConfig::new(hbar).unwrap();
        let v = pair.propagator().potential().clone();
        let hjb = hjb_from_eta(&pair).unwrap();
        let spec = LagrangianSpec::from_hjb(&hjb, v, &cfg).unwrap();
        let shifts = [Perturbation {
            id: 0,
            shift: DriftShift::Constant(0.5),
        }];
        let opts = SimulationOptions::new(8000, 3).with_substeps(16);
        let report = verify_value_bound(&spec, &hjb, &shifts, 0.5, &opts).unwrap();
        assert!(report.passed(), "{report:?}");
        let gap = report.rows[1].j_hat.value - report.rows[1].value;
        assert!((gap - 0.125).abs() < 3.0 * report.rows[1].j_hat.se + 0.01, "gap {gap}");
    }

    #[test]
    fn action_estimators_agree() {
        let (omega, hbar) = (1.0, 1.0);
        let pair = harmonic_pair(241, 40, omega, hbar, mixture());
        let cfg = DeformationConfig::new(hbar).unwrap();
        let v = pair.propagator().potential().clone();
        let b = forward_drift(&pair).unwrap();
        let hjb = hjb_from_eta(&pair).unwrap();
        let spec = LagrangianSpec::from_hjb(&hjb, v.clone(), &cfg).unwrap();
        let law = InitialLaw::Density(pair.log_rho().slice(0).to_vec());
        let opts = SimulationOptions::new(20_000, 5).with_substeps(8).recording_substeps();
        let ens = simulate_forward(&b, &law, &opts).unwrap();
        let energy = EnergyField::new(b.field(), &v, hbar);
        let j = action_estimate(&ens, &b, &spec);
        let pc = action_pc_estimate(&ens, &b, &energy, &spec);
        assert!(
            pc.minus(&j).estimate.within(0.0, 3.0),
            "{:?} vs {:?}",
            j.estimate,
            pc.estimate
        );
    }

    #[test]
    fn free_action_is_terminal_variance() {
        let g = SpatialGrid::new(-12.0, 12.0, 481).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let cfg = DeformationConfig::new(0.5).unwrap();
        let b = DriftField::from_fn(&g, &tg, Direction::Forward, 0.5, |_, _| 0.0).unwrap();
        let ens = simulate_forward(&b, &InitialLaw::Point(0.4), &SimulationOptions::new(20_000, 1)).unwrap();
        let zero = LagrangianSpec::new(&g, Potential::free(), alloc::vec![0.0; g.len()], &cfg).unwrap();
        assert!(action_estimate(&ens, &b, &zero).per_path.iter().all(|v| *v == 0.0));
        let sq = LagrangianSpec::new(&g, Potential::free(), g.points().iter().map(|x| x * x).collect(), &cfg).unwrap();
        assert!(action_estimate(&ens, &b, &sq).estimate.within(0.16 + 0.5, 3.0));
    }
}
