//! Experiment configuration: a versioned JSON document that fails closed on
//! unknown keys and carries its own content fingerprint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bernstein_core::field::Window;
use bernstein_core::kernel::{KernelMethod, Propagator};
use bernstein_core::schroedinger::{BoundaryDensities, DensitySpec, SolverOptions};
use bernstein_core::{DeformationConfig, Potential, SpatialGrid, TimeGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA: &str = "bernstein-experiment/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    Free {},
    Harmonic {
        omega: f64,
    },
    /// Values at the grid nodes.
    Tabulated {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    /// Closed form when available, Crank-Nicolson otherwise.
    #[default]
    Auto,
    Gaussian,
    Mehler,
    CrankNicolson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityConfig {
    Gaussian {
        mean: f64,
        std: f64,
    },
    Mixture {
        components: Vec<MixtureComponent>,
    },
    /// Values at the grid nodes, renormalised on use.
    Tabulated {
        values: Vec<f64>,
    },
}

impl DensityConfig {
    pub fn to_spec(&self) -> DensitySpec {
        match self {
            Self::Gaussian { mean, std } => DensitySpec::Gaussian { mean: *mean, std: *std },
            Self::Mixture { components } => {
                DensitySpec::Mixture(components.iter().map(|c| (c.weight, c.mean, c.std)).collect())
            }
            Self::Tabulated { values } => DensitySpec::Tabulated(values.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub paths: usize,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_substeps() -> usize {
    8
}

/// Region of the space-time box where field checks are evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

/// Gaussian bump `amplitude exp(-(x - center)^2 / (2 width^2))` added to the
/// forward drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueBoundSpec {
    pub start: f64,
    pub perturbations: usize,
    pub paths: usize,
    #[serde(default = "default_value_bound_substeps")]
    pub substeps: usize,
}

fn default_value_bound_substeps() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoetherSpec {
    /// Names from the built-in catalog or the shipped triple file.
    pub triples: Vec<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaledFieldSpec {
    Eta,
    EtaStar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSpec {
    pub alphas: Vec<f64>,
    pub field: ScaledFieldSpec,
    /// Paths for the Wiener self-similarity test; absent skips it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wiener_paths: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub name: String,
    pub seed: u64,
    pub hbar: f64,
    pub grid: GridSpec,
    pub time: TimeSpec,
    pub potential: PotentialSpec,
    #[serde(default)]
    pub kernel: KernelChoice,
    pub initial: DensityConfig,
    pub terminal: DensityConfig,
    #[serde(default)]
    pub solver: SolverSpec,
    pub ensemble: EnsembleSpec,
    pub window: WindowSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_bound: Option<ValueBoundSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noether: Option<NoetherSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// The part of a config that determines the Schroedinger pair.
#[derive(Serialize)]
struct ProblemKey<'a> {
    hbar: f64,
    grid: &'a GridSpec,
    time: &'a TimeSpec,
    potential: &'a PotentialSpec,
    kernel: KernelChoice,
    initial: &'a DensityConfig,
    terminal: &'a DensityConfig,
    solver: &'a SolverSpec,
}

fn sha256_of(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    format!("sha256:{}", hex::encode(Sha256::digest(&bytes)))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that can be checked without solving.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(Error::Config(format!(
                "unsupported schema {:?}, expected {SCHEMA:?}",
                self.schema
            )));
        }
        let w = &self.window;
        if !(w.x_min < w.x_max && w.t_min <= w.t_max) {
            return Err(Error::Config("window bounds are out of order".into()));
        }
        if self.ensemble.paths == 0 || self.ensemble.substeps == 0 {
            return Err(Error::Config("ensemble needs at least one path and one substep".into()));
        }
        let grid = self.spatial_grid()?;
        self.time_grid()?;
        self.deformation()?;
        self.potential_on(&grid)?;
        self.propagator()?;
        self.boundary_densities()?;
        if let Some(s) = &self.scaling {
            if !matches!(self.potential, PotentialSpec::Free {}) {
                return Err(Error::Config("scaling checks need the free potential".into()));
            }
            if self.time.start != 0.0 {
                return Err(Error::Config("scaling checks need a time grid starting at 0".into()));
            }
            if s.alphas.iter().any(|a| !a.is_finite()) {
                return Err(Error::Config("scaling exponents must be finite".into()));
            }
        }
        Ok(())
    }

    /// Content hash of the whole config except the output directory.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        sha256_of(&c)
    }

    /// Content hash of the fields that determine the solved pair.
    pub fn problem_fingerprint(&self) -> String {
        sha256_of(&ProblemKey {
            hbar: self.hbar,
            grid: &self.grid,
            time: &self.time,
            potential: &self.potential,
            kernel: self.kernel,
            initial: &self.initial,
            terminal: &self.terminal,
            solver: &self.solver,
        })
    }

    pub fn spatial_grid(&self) -> Result<SpatialGrid> {
        Ok(SpatialGrid::new(self.grid.x_min, self.grid.x_max, self.grid.points)?)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        Ok(TimeGrid::new(self.time.start, self.time.end, self.time.steps)?)
    }

    pub fn deformation(&self) -> Result<DeformationConfig> {
        Ok(DeformationConfig::new(self.hbar)?)
    }

    pub fn potential_on(&self, grid: &SpatialGrid) -> Result<Potential> {
        Ok(match &self.potential {
            PotentialSpec::Free {} => Potential::free(),
            PotentialSpec::Harmonic { omega } => Potential::harmonic(*omega)?,
            PotentialSpec::Tabulated { values } => Potential::tabulated(grid, values.clone())?,
        })
    }

    pub fn propagator(&self) -> Result<Propagator> {
        let grid = self.spatial_grid()?;
        let v = self.potential_on(&grid)?;
        let cfg = self.deformation()?;
        Ok(match self.kernel {
            KernelChoice::Auto => Propagator::preferred(&grid, &v, &cfg),
            KernelChoice::Gaussian => Propagator::new(&grid, &v, &cfg, KernelMethod::Gaussian)?,
            KernelChoice::Mehler => Propagator::new(&grid, &v, &cfg, KernelMethod::Mehler)?,
            KernelChoice::CrankNicolson => Propagator::new(&grid, &v, &cfg, KernelMethod::CrankNicolson)?,
        })
    }

    pub fn boundary_densities(&self) -> Result<BoundaryDensities> {
        let grid = self.spatial_grid()?;
        Ok(BoundaryDensities::from_specs(
            &grid,
            &self.initial.to_spec(),
            &self.terminal.to_spec(),
        )?)
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            initial_log_eta_u: None,
        }
    }

    pub fn check_window(&self) -> Window {
        let w = &self.window;
        Window::new(w.x_min, w.x_max, w.t_min, w.t_max)
    }

    /// Same experiment with every other grid node and time step, used for
    /// observed-order checks. Tabulated inputs are subsampled.
    pub fn coarsened(&self) -> Result<Self> {
        if self.grid.points.is_multiple_of(2) || self.time.steps % 2 == 1 {
            return Err(Error::Config(format!(
                "order checks need an odd node count and an even step count, got {} and {}",
                self.grid.points, self.time.steps
            )));
        }
        let every_other = |v: &[f64]| v.iter().step_by(2).copied().collect::<Vec<_>>();
        let mut c = self.clone();
        c.grid.points = self.grid.points.div_ceil(2);
        c.time.steps = self.time.steps / 2;
        if let PotentialSpec::Tabulated { values } = &mut c.potential {
            *values = every_other(values);
        }
        for d in [&mut c.initial, &mut c.terminal] {
            if let DensityConfig::Tabulated { values } = d {
                *values = every_other(values);
            }
        }
        Ok(c)
    }

    /// Output directory: the override, else the config value, else `out/<name>`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output.clone())
            .unwrap_or_else(|| PathBuf::from("out").join(&self.name))
    }
}
