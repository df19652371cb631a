//! The invariant suite run by `verify`, `hjb` and `noether`.
//!
//! Field residuals are judged by their observed order between the configured
//! grid and the grid with every other node and step, so any check is
//! tolerance-free: a consistent field converges at second order while a
//! planted defect leaves an order near zero.

use bernstein_core::dynamics::regress_forward_drift;
use bernstein_core::dynamics::{
    time_reverse, uncertainty_estimate, Direction, DriftField, GridDensity, InitialLaw, PathEnsemble, SimulationOptions,
};
use bernstein_core::field::{observed_order, ResidualField, Window};
use bernstein_core::noether::{
    determining_residual, field_martingale_residual, martingale_test, martingale_test_fn, noether_charge,
    scale_ensemble, scaling_transform, NoetherCharge, ScaledField, SymmetryTriple,
};
use bernstein_core::schroedinger::SchroedingerPair;
use bernstein_core::variational::{
    action_estimate, action_pc_estimate, backward_sel_residual, energy_field, energy_martingale_residual, hjb_from_eta,
    hjb_gradient_residual, sel_residual, she_residual, symmetric_el_residual, verify_value_bound_with, LagrangianSpec,
    Perturbation, ValueBoundReport,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, ScaledFieldSpec};
use crate::error::{Error, Result};
use crate::experiment::{derived_seed, window_slices, Experiment, VALUE_BOUND_SEED, WIENER_SEED};
use crate::hypothesis::{chi_square_gof, variance_ratio_test};
use crate::{parallel, triples};

/// Minimum observed order for differenced residuals.
pub const ORDER_TOL: f64 = 1.8;
/// Residuals below this are rounding noise and pass outright.
pub const ROUNDING_TOL: f64 = 1e-9;
pub const DETAILED_BALANCE_TOL: f64 = 1e-10;
pub const OSMOTIC_TOL: f64 = 1e-6;
pub const DETERMINING_TOL: f64 = 1e-12;
pub const DOOB_TOL: f64 = 1e-8;
pub const SYMMETRY_TOL: f64 = 1e-8;
pub const CLAMP_TOL: f64 = 1e-3;
pub const SIGNIFICANCE: f64 = 0.01;
pub const Z_TOL: f64 = 3.0;
pub const REGRESSION_BINS: usize = 5;
pub const GOF_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: Option<f64>,
    pub tolerance: Option<f64>,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Check {
    fn judged(name: &str, value: f64, tolerance: f64, pass: bool) -> Self {
        Self {
            name: name.into(),
            value: Some(value),
            tolerance: Some(tolerance),
            verdict: if pass && value.is_finite() {
                Verdict::Pass
            } else {
                Verdict::Fail
            },
            reason: None,
        }
    }

    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Self::judged(name, value, tolerance, value <= tolerance)
    }

    pub fn at_least(name: &str, value: f64, tolerance: f64) -> Self {
        Self::judged(name, value, tolerance, value >= tolerance)
    }

    /// Observed order of a residual sup-norm between the coarse and fine
    /// levels. A fine residual below `ROUNDING_TOL * scale` is at rounding
    /// level and passes directly.
    pub fn order(name: &str, coarse: f64, fine: f64, scale: f64) -> Self {
        let rounding = ROUNDING_TOL * scale.max(1.0);
        if fine <= rounding {
            return Self::at_most(name, fine, rounding).because("residual at rounding level".into());
        }
        Self::at_least(name, observed_order(coarse, fine), ORDER_TOL)
            .because(format!("sup residual {fine:.3e} fine, {coarse:.3e} coarse"))
    }

    pub fn skipped(name: &str, reason: &str) -> Self {
        Self {
            name: name.into(),
            value: None,
            tolerance: None,
            verdict: Verdict::Skipped,
            reason: Some(reason.into()),
        }
    }

    pub fn failed(name: &str, reason: String) -> Self {
        Self {
            name: name.into(),
            value: None,
            tolerance: None,
            verdict: Verdict::Fail,
            reason: Some(reason),
        }
    }

    pub fn because(mut self, reason: String) -> Self {
        self.reason = Some(reason);
        self
    }
}

/// Runs a check, turning an error into a failed verdict.
fn guarded(name: &str, f: impl FnOnce() -> Result<Check>) -> Check {
    f().unwrap_or_else(|e| Check::failed(name, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub scenario: String,
    pub config_fingerprint: String,
    pub seed: u64,
    pub paths: usize,
    pub checks: Vec<Check>,
}

impl VerificationReport {
    pub fn new(config: &ExperimentConfig, checks: Vec<Check>) -> Self {
        Self {
            scenario: config.name.clone(),
            config_fingerprint: config.fingerprint(),
            seed: config.seed,
            paths: config.ensemble.paths,
            checks,
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.verdict != Verdict::Fail)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.verdict == Verdict::Fail)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// The configured grid and its coarsening, both solved.
pub struct Levels {
    pub fine: Experiment,
    pub coarse: Experiment,
}

impl Levels {
    pub fn solve(config: &ExperimentConfig, fine_pair: Option<SchroedingerPair>) -> Result<Self> {
        let fine = match fine_pair {
            Some(p) => Experiment::from_pair(config, p)?,
            None => Experiment::solve(config)?,
        };
        let coarse = Experiment::solve(&config.coarsened()?)?;
        for e in [&fine, &coarse] {
            if window_slices(e.pair.tgrid(), &e.window()).is_none() {
                return Err(Error::Config(
                    "the check window must contain at least two time nodes on both levels".into(),
                ));
            }
        }
        Ok(Self { fine, coarse })
    }

    fn order_of(&self, name: &str, residual: impl Fn(&Experiment) -> Result<ResidualField>) -> Check {
        guarded(name, || {
            let w = self.fine.window();
            let fine = residual(&self.fine)?.sup_norm_in(&w);
            let coarse = residual(&self.coarse)?.sup_norm_in(&w);
            Ok(Check::order(name, coarse, fine, self.fine.drift_scale()))
        })
    }

    /// Grid error of a generator residual seen by the ensemble: the
    /// Richardson estimate `|R_fine - R_coarse| / 3` averaged over the paths
    /// on each slice `first..=last`, maximised over slices.
    pub fn discretisation_floor(
        &self,
        ens: &PathEnsemble,
        first: usize,
        last: usize,
        residual: impl Fn(&Experiment) -> Result<ResidualField>,
    ) -> Result<f64> {
        let fine = residual(&self.fine)?;
        let coarse = residual(&self.coarse)?;
        let tgrid = ens.tgrid();
        let mut floor = 0.0f64;
        for k in first..=last {
            let t = tgrid.time(k);
            let (mut sum, mut n) = (0.0, 0usize);
            for p in ens.paths() {
                let x = p.positions[k];
                let gap = (fine.field().interpolate(x, t) - coarse.field().interpolate(x, t)).abs();
                if gap.is_finite() {
                    sum += gap;
                    n += 1;
                }
            }
            if n > 0 {
                floor = floor.max(sum / (3.0 * n as f64));
            }
        }
        Ok(floor)
    }
}

/// Boundary system, detailed balance, osmotic identity and symmetry.
pub fn solution_checks(e: &Experiment) -> Vec<Check> {
    let pair = &e.pair;
    let mut out = vec![
        Check::at_most("ipf_marginal_residual", pair.residual(), e.config.solver.tol),
        guarded("detailed_balance", || {
            Ok(Check::at_most(
                "detailed_balance",
                pair.detailed_balance_residual()?,
                DETAILED_BALANCE_TOL,
            ))
        }),
        guarded("osmotic_identity", || {
            let r = bernstein_core::dynamics::osmotic_residual(pair)?;
            Ok(Check::at_most("osmotic_identity", r, OSMOTIC_TOL))
        }),
    ];
    if e.config.initial == e.config.terminal {
        let w = e.window();
        let grid = pair.grid();
        let gaps: Vec<f64> = (0..grid.len())
            .filter(|&i| grid.point(i) >= w.x_min && grid.point(i) <= w.x_max)
            .map(|i| pair.log_eta_star_s()[i] - pair.log_eta_u()[i])
            .collect();
        let (lo, hi) = gaps
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &g| (a.min(g), b.max(g)));
        out.push(Check::at_most("symmetric_pair", 0.5 * (hi - lo), SYMMETRY_TOL));
    } else {
        out.push(Check::skipped("symmetric_pair", "boundary densities differ"));
    }
    out
}

/// Differenced residuals of the stochastic Euler-Lagrange family.
pub fn variational_checks(levels: &Levels) -> Vec<Check> {
    vec![
        levels.order_of("sel_forward", |e| {
            Ok(sel_residual(e.forward.field(), &e.potential, e.hbar()))
        }),
        levels.order_of("sel_backward", |e| {
            Ok(backward_sel_residual(e.backward.field(), &e.potential, e.hbar()))
        }),
        levels.order_of("she_momentum", |e| {
            Ok(she_residual(e.forward.field(), &e.potential, e.hbar()).momentum)
        }),
        levels.order_of("symmetric_law", |e| {
            Ok(symmetric_el_residual(
                e.forward.field(),
                e.backward.field(),
                &e.potential,
                e.hbar(),
            ))
        }),
        levels.order_of("energy_field_martingale", |e| {
            Ok(energy_martingale_residual(e.forward.field(), &e.potential, e.hbar()))
        }),
    ]
}

/// Log-transform residual, gradient identity and, when configured, the
/// value bound together with its report.
pub fn hjb_checks(levels: &Levels) -> (Vec<Check>, Option<ValueBoundReport>) {
    let mut out = vec![
        levels.order_of("hjb_log_transform", |e| Ok(hjb_from_eta(&e.pair)?.residual().clone())),
        levels.order_of("hjb_gradient_identity", |e| {
            Ok(hjb_gradient_residual(
                &hjb_from_eta(&e.pair)?,
                e.forward.field(),
                &e.potential,
            )?)
        }),
    ];
    match value_bound(&levels.fine) {
        Ok(Some(report)) => {
            out.extend(value_bound_checks(&report));
            return (out, Some(report));
        }
        Ok(None) => {
            out.push(Check::skipped("value_bound_optimal", "no value_bound block"));
            out.push(Check::skipped("value_bound_violations", "no value_bound block"));
        }
        Err(e) => out.push(Check::failed("value_bound", e.to_string())),
    }
    (out, None)
}

/// Runs the optimal and perturbed controls from the configured start.
pub fn value_bound(e: &Experiment) -> Result<Option<ValueBoundReport>> {
    let Some(spec) = &e.config.value_bound else {
        return Ok(None);
    };
    let hjb = hjb_from_eta(&e.pair)?;
    let lagrangian = LagrangianSpec::from_hjb(&hjb, e.potential.clone(), e.pair.propagator().cfg())?;
    let seed = derived_seed(e.config.seed, VALUE_BOUND_SEED);
    let suite = Perturbation::random_suite(spec.perturbations, seed);
    let opts = SimulationOptions::new(spec.paths, seed).with_substeps(spec.substeps);
    Ok(Some(verify_value_bound_with(
        &lagrangian,
        &hjb,
        &suite,
        spec.start,
        &opts,
        &parallel::simulate_forward,
    )?))
}

pub fn value_bound_checks(report: &ValueBoundReport) -> Vec<Check> {
    let optimal = &report.rows[0];
    vec![
        Check::at_most("value_bound_optimal", optimal.j_hat.z_score(optimal.value).abs(), Z_TOL).because(format!(
            "J = {} +- {}, S = {}",
            optimal.j_hat.value, optimal.j_hat.se, optimal.value
        )),
        Check::at_most("value_bound_violations", report.violations() as f64, 0.0)
            .because(format!("{} perturbed drifts", report.rows.len() - 1)),
    ]
}

/// Monte Carlo checks on the forward ensemble.
pub fn ensemble_checks(levels: &Levels, ens: &PathEnsemble) -> Vec<Check> {
    let e = &levels.fine;
    let (first, last) = window_slices(ens.tgrid(), &e.window()).expect("window validated");
    let mid = (first + last) / 2;
    let hbar = e.hbar();
    let mut out = vec![
        Check::at_most("clamp_fraction", ens.clamped_fraction(), CLAMP_TOL),
        marginal_check(e, ens, (3 * first + last) / 4),
        marginal_check(e, ens, mid),
        marginal_check(e, ens, (first + 3 * last) / 4),
        guarded("uncertainty_relation", || {
            let est = uncertainty_estimate(&e.forward, &e.backward, ens, mid)?;
            Ok(Check::at_most("uncertainty_relation", est.z_score(hbar).abs(), Z_TOL)
                .because(format!("E = {} +- {} against hbar = {hbar}", est.value, est.se)))
        }),
        guarded("time_reversal", || {
            let rev = time_reverse(ens);
            let tg = e.pair.tgrid();
            let span = tg.t_start() + tg.t_end();
            let probe = tg.n_steps() - mid;
            let probe = if probe == tg.n_steps() { probe - 1 } else { probe };
            let bins = regress_forward_drift(&rev, probe, REGRESSION_BINS, |x, t| -e.backward.value(x, span - t))?;
            let worst = bins
                .iter()
                .map(|b| b.drift.z_score(b.reference).abs())
                .fold(0.0, f64::max);
            Ok(Check::at_most("time_reversal", worst, Z_TOL))
        }),
    ];
    let energy = energy_field(e.forward.field(), &e.potential, hbar);
    out.push(guarded("action_agreement", || {
        let hjb = hjb_from_eta(&e.pair)?;
        let spec =
            LagrangianSpec::from_hjb(&hjb, e.potential.clone(), e.pair.propagator().cfg())?.without_terminal_cost();
        let dense = e.forward_ensemble_substeps()?;
        let (a, b) = window_slices(dense.tgrid(), &e.window()).expect("window validated");
        let window = dense.restricted(a, b)?;
        let j = action_estimate(&window, &e.forward, &spec);
        let pc = action_pc_estimate(&window, &e.forward, &energy, &spec);
        let gap = j.minus(&pc).estimate;
        Ok(
            Check::at_most("action_agreement", gap.z_score(0.0).abs(), Z_TOL).because(format!(
                "J = {}, J_pc = {}, paired gap {} +- {}",
                j.estimate.value, pc.estimate.value, gap.value, gap.se
            )),
        )
    }));
    out.push(guarded("energy_martingale", || {
        let floor = levels.discretisation_floor(ens, first, last, |lv| {
            Ok(energy_martingale_residual(lv.forward.field(), &lv.potential, lv.hbar()))
        })?;
        let v = martingale_test_fn(ens, first, last, floor, |x, t| energy.value(x, t))?;
        Ok(Check::at_most("energy_martingale", v.slope.abs(), 3.0 * v.se + v.floor)
            .because(format!("slope {} se {} floor {}", v.slope, v.se, v.floor)))
    }));
    out
}

/// Pearson test of the slice `k` against `rho(., t_k)`.
pub fn marginal_check(e: &Experiment, ens: &PathEnsemble, k: usize) -> Check {
    let name = format!("marginal_chi_square_{}", ens.tgrid().time(k));
    guarded(&name, || {
        let density = GridDensity::new(e.pair.grid(), e.pair.log_rho().slice(k))?;
        let t = chi_square_gof(&ens.slice(k), &density, GOF_BINS);
        Ok(Check::at_least(&name, t.p_value, SIGNIFICANCE).because(format!(
            "chi2 {:.2} on {} dof at t = {}",
            t.statistic,
            t.dof,
            ens.tgrid().time(k)
        )))
    })
}

fn charge_of(triple: &SymmetryTriple, e: &Experiment) -> Result<NoetherCharge> {
    let b = triples::bindings(
        e.hbar(),
        &e.potential,
        &e.config.noether.as_ref().map(|n| n.params.clone()).unwrap_or_default(),
    );
    let energy = energy_field(e.forward.field(), &e.potential, e.hbar());
    Ok(noether_charge(
        triple,
        e.forward.field(),
        &energy,
        &b,
        e.forward.provenance(),
    )?)
}

/// Determining equations, differenced charge residual and Monte Carlo
/// martingale test for one triple.
pub fn noether_checks(triple: &SymmetryTriple, levels: &Levels, ens: &PathEnsemble) -> Vec<Check> {
    let e = &levels.fine;
    let name = |what: &str| format!("noether_{}_{what}", triple.name);
    let params = e.config.noether.as_ref().map(|n| n.params.clone()).unwrap_or_default();
    let bindings = triples::bindings(e.hbar(), &e.potential, &params);
    let determining = name("determining");
    let field = name("field");
    let martingale = name("martingale");
    vec![
        guarded(&determining, || {
            let r = determining_residual(triple, e.pair.grid(), e.pair.tgrid(), &e.potential, e.hbar(), &bindings)?;
            Ok(Check::at_most(&determining, r.max(), DETERMINING_TOL).because(format!("{r:?}")))
        }),
        levels.order_of(&field, |lv| {
            Ok(field_martingale_residual(
                &charge_of(triple, lv)?,
                lv.forward.field(),
                lv.hbar(),
            ))
        }),
        guarded(&martingale, || {
            let charge = charge_of(triple, e)?;
            let (first, last) = window_slices(ens.tgrid(), &e.window()).expect("window validated");
            let floor = levels.discretisation_floor(ens, first, last, |lv| {
                Ok(field_martingale_residual(
                    &charge_of(triple, lv)?,
                    lv.forward.field(),
                    lv.hbar(),
                ))
            })?;
            let v = martingale_test(&charge, ens, first, last, floor)?;
            Ok(Check::at_most(&martingale, v.slope.abs(), 3.0 * v.se + v.floor)
                .because(format!("slope {} se {} floor {}", v.slope, v.se, v.floor)))
        }),
    ]
}

/// Scaling transform residuals for every configured exponent and the Wiener
/// self-similarity test.
pub fn scaling_checks(levels: &Levels) -> Vec<Check> {
    let e = &levels.fine;
    let Some(spec) = &e.config.scaling else {
        return vec![Check::skipped("scaling", "no scaling block")];
    };
    let which = match spec.field {
        ScaledFieldSpec::Eta => ScaledField::Eta,
        ScaledFieldSpec::EtaStar => ScaledField::EtaStar,
    };
    let w = e.window();
    let scale = e.drift_scale();
    let mut out = Vec::new();
    for &alpha in &spec.alphas {
        let name = |what: &str| format!("scaling_{alpha}_{what}");
        let transforms = scaling_transform(&levels.fine.pair, alpha, which)
            .and_then(|f| Ok((f, scaling_transform(&levels.coarse.pair, alpha, which)?)));
        let (fine, coarse) = match transforms {
            Ok(t) => t,
            Err(err) => {
                out.push(Check::failed(&name("transform"), err.to_string()));
                continue;
            }
        };
        // The rescaled boxes differ between levels; compare over the window
        // part that lies inside the interior of the coarse box.
        let (cg, ct) = (coarse.grid(), coarse.tgrid());
        let w = Window::new(
            w.x_min.max(cg.point(1)),
            w.x_max.min(cg.point(cg.len() - 2)),
            w.t_min.max(ct.time(1)),
            w.t_max.min(ct.time(ct.n_steps() - 1)),
        );
        if w.x_min > w.x_max || window_slices(fine.tgrid(), &w).is_none() || window_slices(ct, &w).is_none() {
            out.push(Check::skipped(
                &name("transform"),
                "rescaled box misses the check window",
            ));
            continue;
        }
        out.push(Check::order(
            &name("ratio_martingale"),
            coarse.martingale_residual().sup_norm_in(&w),
            fine.martingale_residual().sup_norm_in(&w),
            scale,
        ));
        out.push(Check::order(
            &name("heat_equation"),
            coarse.heat_residual().sup_norm_in(&w),
            fine.heat_residual().sup_norm_in(&w),
            scale,
        ));
        out.push(Check::at_most(&name("doob_drift"), fine.doob_drift_check(&w), DOOB_TOL));
        out.push(Check::order(
            &name("rescaled_drift"),
            coarse.rescaled_drift_gap(&w),
            fine.rescaled_drift_gap(&w),
            scale,
        ));
    }
    match spec.wiener_paths {
        Some(n) => out.extend(wiener_self_similarity(e, &spec.alphas, n)),
        None => out.push(Check::skipped("wiener_self_similarity", "no wiener_paths")),
    }
    out
}

/// `e^a W(e^-2a t)` has variance `hbar t`: chi-square test of the scaled
/// ensemble at its final time for every exponent.
pub fn wiener_self_similarity(e: &Experiment, alphas: &[f64], n_paths: usize) -> Vec<Check> {
    let hbar = e.hbar();
    let ensemble =
        DriftField::from_fn(e.pair.grid(), e.pair.tgrid(), Direction::Forward, hbar, |_, _| 0.0).and_then(|drift| {
            let opts = SimulationOptions::new(n_paths, derived_seed(e.config.seed, WIENER_SEED));
            parallel::simulate_forward(&drift, &InitialLaw::Point(0.0), &opts)
        });
    let ensemble = match ensemble {
        Ok(ens) => ens,
        Err(err) => return vec![Check::failed("wiener_self_similarity", err.to_string())],
    };
    alphas
        .iter()
        .map(|&alpha| {
            let name = format!("wiener_self_similarity_{alpha}");
            guarded(&name, || {
                let scaled = scale_ensemble(&ensemble, alpha)?;
                let last = scaled.tgrid().n_steps();
                let tau = scaled.tgrid().time(last);
                let t = variance_ratio_test(&scaled.slice(last), hbar * tau);
                Ok(Check::at_least(&name, t.p_value, SIGNIFICANCE)
                    .because(format!("variance ratio statistic {:.1} on {} dof", t.statistic, t.dof)))
            })
        })
        .collect()
}

/// The whole suite for one config.
pub fn verify(config: &ExperimentConfig, pair: Option<SchroedingerPair>) -> Result<VerificationReport> {
    let levels = Levels::solve(config, pair)?;
    let e = &levels.fine;
    let mut checks = solution_checks(e);
    checks.extend(variational_checks(&levels));
    checks.extend(hjb_checks(&levels).0);
    let ens = e.forward_ensemble()?;
    checks.extend(ensemble_checks(&levels, &ens));
    match &config.noether {
        Some(spec) => {
            for name in &spec.triples {
                match triples::lookup(name) {
                    Ok(t) => checks.extend(noether_checks(&t, &levels, &ens)),
                    Err(err) => checks.push(Check::failed(&format!("noether_{name}"), err.to_string())),
                }
            }
        }
        None => checks.push(Check::skipped("noether", "no noether block")),
    }
    checks.extend(scaling_checks(&levels));
    Ok(VerificationReport::new(config, checks))
}
