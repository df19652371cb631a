//! Rayon drivers. Every path owns its RNG stream, so results are identical
//! to the sequential core routines regardless of thread count.

use bernstein_core::dynamics::{Direction, DriftField, InitialLaw, PathEnsemble, PathSimulator, SimulationOptions};
use bernstein_core::kernel::{feynman_kac_from_weights, feynman_kac_steps, feynman_kac_weight};
use bernstein_core::rng::path_rng;
use bernstein_core::stats::Estimate;
use bernstein_core::{DeformationConfig, Error, Potential, Result};
use rayon::prelude::*;

pub fn simulate(drift: &DriftField, law: &InitialLaw, opts: &SimulationOptions) -> Result<PathEnsemble> {
    let sim = PathSimulator::new(drift, law, opts)?;
    let paths = (0..sim.n_paths() as u64).into_par_iter().map(|p| sim.path(p)).collect();
    sim.assemble(paths)
}

pub fn simulate_forward(drift: &DriftField, initial: &InitialLaw, opts: &SimulationOptions) -> Result<PathEnsemble> {
    if drift.direction() != Direction::Forward {
        return Err(Error::InvalidField("forward simulation needs a forward drift".into()));
    }
    simulate(drift, initial, opts)
}

pub fn simulate_backward(drift: &DriftField, terminal: &InitialLaw, opts: &SimulationOptions) -> Result<PathEnsemble> {
    if drift.direction() != Direction::Backward {
        return Err(Error::InvalidField("backward simulation needs a backward drift".into()));
    }
    simulate(drift, terminal, opts)
}

/// Monte Carlo estimate of the kernel `h(s, x, u, z)` from Brownian-bridge
/// weights; path `p` uses stream `p` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn feynman_kac(
    s: f64,
    x: f64,
    u: f64,
    z: f64,
    potential: &Potential,
    cfg: &DeformationConfig,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate> {
    let steps = feynman_kac_steps(u - s);
    let weights: Vec<f64> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| feynman_kac_weight(s, x, u, z, potential, cfg, steps, &mut path_rng(seed, p)))
        .collect();
    feynman_kac_from_weights(s, x, u, z, cfg, &weights)
}
