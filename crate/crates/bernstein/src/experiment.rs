//! A configured experiment with its solved pair and drifts.

use bernstein_core::dynamics::{
    backward_drift, forward_drift, DriftField, InitialLaw, PathEnsemble, SimulationOptions,
};
use bernstein_core::field::Window;
use bernstein_core::schroedinger::{solve_schroedinger_system, SchroedingerPair};
use bernstein_core::{Potential, TimeGrid};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::parallel;

/// Independent seed for one purpose of an experiment.
pub fn derived_seed(seed: u64, purpose: u64) -> u64 {
    seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub const ENSEMBLE_SEED: u64 = 0;
pub const VALUE_BOUND_SEED: u64 = 1;
pub const WIENER_SEED: u64 = 2;

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub pair: SchroedingerPair,
    pub potential: Potential,
    /// Forward drift, with the configured corruption applied.
    pub forward: DriftField,
    pub backward: DriftField,
}

impl Experiment {
    pub fn solve(config: &ExperimentConfig) -> Result<Self> {
        let pair = solve_schroedinger_system(
            &config.propagator()?,
            &config.time_grid()?,
            &config.boundary_densities()?,
            &config.solver_options(),
        )?;
        Self::from_pair(config, pair)
    }

    pub fn from_pair(config: &ExperimentConfig, pair: SchroedingerPair) -> Result<Self> {
        let mut forward = forward_drift(&pair)?;
        if let Some(c) = &config.corruption {
            let (a, m, w) = (c.amplitude, c.center, c.width);
            forward = forward.perturbed(|x, _| a * (-(x - m) * (x - m) / (2.0 * w * w)).exp())?;
        }
        Ok(Self {
            config: config.clone(),
            potential: pair.propagator().potential().clone(),
            backward: backward_drift(&pair)?,
            forward,
            pair,
        })
    }

    pub fn hbar(&self) -> f64 {
        self.pair.hbar()
    }

    pub fn window(&self) -> Window {
        self.config.check_window()
    }

    /// Largest squared drift, forward or backward, over grid nodes in the
    /// check window.
    pub fn drift_scale(&self) -> f64 {
        let (w, grid, tgrid) = (self.window(), self.pair.grid(), self.pair.tgrid());
        let mut out = 0.0f64;
        for k in 0..tgrid.n_slices() {
            for i in 0..grid.len() {
                if w.contains(grid.point(i), tgrid.time(k)) {
                    let b = self
                        .forward
                        .field()
                        .get(i, k)
                        .abs()
                        .max(self.backward.field().get(i, k).abs());
                    out = out.max(b * b);
                }
            }
        }
        out
    }

    pub fn initial_law(&self) -> InitialLaw {
        InitialLaw::Density(self.pair.log_rho().slice(0).to_vec())
    }

    fn ensemble_options(&self) -> SimulationOptions {
        let e = &self.config.ensemble;
        SimulationOptions::new(e.paths, derived_seed(self.config.seed, ENSEMBLE_SEED)).with_substeps(e.substeps)
    }

    /// Forward ensemble from the initial marginal, recorded on the time grid.
    pub fn forward_ensemble(&self) -> Result<PathEnsemble> {
        Ok(parallel::simulate_forward(
            &self.forward,
            &self.initial_law(),
            &self.ensemble_options(),
        )?)
    }

    /// The same paths as [`Self::forward_ensemble`], recorded at every
    /// substep.
    pub fn forward_ensemble_substeps(&self) -> Result<PathEnsemble> {
        let opts = self.ensemble_options().recording_substeps();
        Ok(parallel::simulate_forward(&self.forward, &self.initial_law(), &opts)?)
    }
}

/// First and last time indices inside `[t_min, t_max]`.
pub fn window_slices(tgrid: &TimeGrid, window: &Window) -> Option<(usize, usize)> {
    let inside: Vec<usize> = (0..tgrid.n_slices())
        .filter(|&k| {
            let t = tgrid.time(k);
            t >= window.t_min - 1e-12 && t <= window.t_max + 1e-12
        })
        .collect();
    match (inside.first(), inside.last()) {
        (Some(&a), Some(&b)) if b > a => Some((a, b)),
        _ => None,
    }
}
