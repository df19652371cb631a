use bernstein_core::dynamics::{
    backward_drift, forward_drift, ito_backward_integral, ito_forward_integral, osmotic_residual, simulate_forward,
    stratonovich_integral, Direction, DriftField, InitialLaw, SimulationOptions, VectorFieldA,
};
use bernstein_core::expr::Bindings;
use bernstein_core::field::{observed_order, Window};
use bernstein_core::kernel::{KernelMethod, Propagator};
use bernstein_core::noether::{determining_residual, scaling_transform, ScaledField, SymmetryTriple};
use bernstein_core::schroedinger::{solve_schroedinger_system, BoundaryDensities, DensitySpec, SolverOptions};
use bernstein_core::{DeformationConfig, Potential, SpatialGrid, TimeGrid};
use proptest::prelude::*;

fn gaussian(mean: f64, std: f64) -> DensitySpec {
    DensitySpec::Gaussian { mean, std }
}

fn solve(
    grid: &SpatialGrid,
    tgrid: &TimeGrid,
    v: &Potential,
    hbar: f64,
    initial: &DensitySpec,
    terminal: &DensitySpec,
) -> bernstein_core::schroedinger::SchroedingerPair {
    let cfg = DeformationConfig::new(hbar).unwrap();
    let prop = Propagator::preferred(grid, v, &cfg);
    let bd = BoundaryDensities::from_specs(grid, initial, terminal).unwrap();
    solve_schroedinger_system(&prop, tgrid, &bd, &SolverOptions::default()).unwrap()
}

fn methods() -> impl Strategy<Value = (Potential, KernelMethod)> {
    prop_oneof![
        Just((Potential::free(), KernelMethod::Gaussian)),
        Just((Potential::free(), KernelMethod::CrankNicolson)),
        (0.3f64..2.0).prop_map(|w| (Potential::harmonic(w).unwrap(), KernelMethod::Mehler)),
        (0.3f64..2.0).prop_map(|w| (Potential::harmonic(w).unwrap(), KernelMethod::CrankNicolson)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn chapman_kolmogorov((v, method) in methods(), hbar in 0.5f64..2.0, split in 0.2f64..0.8, tau in 0.2f64..1.0) {
        let grid = SpatialGrid::new(-8.0, 8.0, 129).unwrap();
        let cfg = DeformationConfig::new(hbar).unwrap();
        let p = Propagator::new(&grid, &v, &cfg, method).unwrap();
        let t = split * tau;
        let composed = p.kernel(0.0, t).unwrap().compose(&p.kernel(t, tau).unwrap()).unwrap();
        let whole = p.kernel(0.0, tau).unwrap();
        whole.check_positive().unwrap();
        // the interior block, away from the truncation walls
        let block = || (48..=80).flat_map(|i| (48..=80).map(move |j| (i, j)));
        let peak = block().map(|(i, j)| whole.entry(i, j)).fold(0.0, f64::max);
        let tol = if method == KernelMethod::CrankNicolson { 1e-3 } else { 1e-8 };
        for (i, j) in block() {
            let (a, b) = (composed.entry(i, j), whole.entry(i, j));
            prop_assert!(a > 0.0 && b > 0.0);
            prop_assert!((a - b).abs() <= tol * peak, "{method:?} ({i},{j}): {a} vs {b}");
        }
    }

    #[test]
    fn marginals_are_normalized_and_drifts_osmotic(
        m0 in -1.0f64..1.0, s0 in 0.4f64..1.0, m1 in -1.0f64..1.0, s1 in 0.4f64..1.0, hbar in 0.5f64..1.5,
    ) {
        let grid = SpatialGrid::new(-10.0, 10.0, 201).unwrap();
        let tgrid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let pair = solve(&grid, &tgrid, &Potential::free(), hbar, &gaussian(m0, s0), &gaussian(m1, s1));
        let history = &pair.boundary().history;
        prop_assert!(history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15), "{history:?}");
        let marginals = pair.marginals();
        prop_assert!(marginals.max_mass_error() < 1e-6);
        prop_assert!(marginals.rho.values().iter().all(|r| *r >= 0.0));
        prop_assert!(osmotic_residual(&pair).unwrap() < 1e-6);
        prop_assert!(pair.detailed_balance_residual().unwrap() < 1e-10);
    }

    #[test]
    fn gauge_constant_leaves_the_law_alone(c in 1e-3f64..1e3) {
        let grid = SpatialGrid::new(-8.0, 8.0, 129).unwrap();
        let tgrid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let v = Potential::harmonic(0.8).unwrap();
        let pair = solve(&grid, &tgrid, &v, 1.0, &gaussian(0.5, 0.7), &gaussian(-0.3, 0.9));
        let moved = pair.rescaled(c).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        prop_assert!(close(moved.log_rho().values(), pair.log_rho().values()));
        prop_assert!(close(
            forward_drift(&moved).unwrap().field().values(),
            forward_drift(&pair).unwrap().field().values(),
        ));
        prop_assert!(close(
            backward_drift(&moved).unwrap().field().values(),
            backward_drift(&pair).unwrap().field().values(),
        ));
    }

    #[test]
    fn stratonovich_is_the_mean_of_the_ito_sums(seed in any::<u64>(), slope in -2.0f64..2.0, bias in -1.0f64..1.0) {
        let grid = SpatialGrid::new(-10.0, 10.0, 201).unwrap();
        let tgrid = TimeGrid::new(0.0, 1.0, 32).unwrap();
        let drift = DriftField::from_fn(&grid, &tgrid, Direction::Forward, 1.0, |x, _| -0.5 * x).unwrap();
        let ens = simulate_forward(&drift, &InitialLaw::Point(bias), &SimulationOptions::new(200, seed)).unwrap();
        let a = VectorFieldA::from_fn(&grid, |x| slope * x + (x * 0.7).sin()).unwrap();
        let fwd = ito_forward_integral(&ens, &a);
        let bwd = ito_backward_integral(&ens, &a);
        let strat = stratonovich_integral(&ens, &a);
        for ((f, b), s) in fwd.per_path.iter().zip(&bwd.per_path).zip(&strat.per_path) {
            prop_assert!((s - 0.5 * (f + b)).abs() <= 1e-12 * (1.0 + s.abs()));
        }
    }

    #[test]
    fn catalog_combinations_solve_the_determining_equations(coeffs in prop::collection::vec(-3.0f64..3.0, 4)) {
        let grid = SpatialGrid::new(-4.0, 4.0, 33).unwrap();
        let tgrid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let catalog = SymmetryTriple::catalog();
        let terms: Vec<(f64, &SymmetryTriple)> = coeffs.iter().copied().zip(&catalog).collect();
        let combo = SymmetryTriple::linear_combination("combo", &terms).unwrap();
        let r = determining_residual(&combo, &grid, &tgrid, &Potential::free(), 1.0, &Bindings::new()).unwrap();
        prop_assert!(r.max() < 1e-12, "{r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn scaled_fields_stay_positive_martingales(alpha in -0.5f64..0.5, star in any::<bool>()) {
        prop_assume!(alpha.abs() > 0.02);
        let which = if star { ScaledField::EtaStar } else { ScaledField::Eta };
        let transform = |points: usize, steps: usize| {
            let grid = SpatialGrid::new(-12.0, 12.0, points).unwrap();
            let tgrid = TimeGrid::new(0.0, 1.0, steps).unwrap();
            let pair = solve(&grid, &tgrid, &Potential::free(), 1.0, &gaussian(0.0, 0.6), &gaussian(0.3, 1.1));
            scaling_transform(&pair, alpha, which).unwrap()
        };
        let (coarse, fine) = (transform(193, 16), transform(385, 32));
        for s in [&coarse, &fine] {
            prop_assert!(s.log_scaled().values().iter().all(|v| v.is_finite()), "h_alpha vanished");
        }
        let (g, tg) = (coarse.grid(), coarse.tgrid());
        let window = Window::new(
            g.point(1).max(-3.0),
            g.point(g.len() - 2).min(3.0),
            tg.time(1).max(0.25),
            tg.time(tg.n_steps() - 1).min(0.75),
        );
        let (coarse, fine) = (
            coarse.martingale_residual().sup_norm_in(&window),
            fine.martingale_residual().sup_norm_in(&window),
        );
        let order = observed_order(coarse, fine);
        prop_assert!(order >= 1.8, "alpha {alpha}: {coarse} -> {fine}, order {order}");
    }
}
