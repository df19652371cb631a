//! On-disk artifacts. CSV files start with `#` comment lines carrying the
//! config fingerprint, then a header row; all use `\n` line endings and
//! shortest round-trip decimal floats.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use bernstein_core::dynamics::PathEnsemble;
use bernstein_core::schroedinger::{BoundaryPair, SchroedingerPair};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const PAIR_FORMAT: &str = "bernstein-pair/1";

/// Tabular output with a fingerprinted comment header.
pub struct CsvOutput {
    inner: csv::Writer<BufWriter<File>>,
    path: std::path::PathBuf,
}

impl CsvOutput {
    pub fn create(path: &Path, fingerprint: &str, columns: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "# config_fingerprint: {fingerprint}").map_err(|e| Error::io(path, e))?;
        let mut inner = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        inner.write_record(columns).map_err(|e| csv_error(path, e))?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.inner.write_record(fields).map_err(|e| csv_error(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Serialized boundary functions; the fields are rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairFile {
    pub format: String,
    pub config_fingerprint: String,
    pub problem_fingerprint: String,
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
    pub log_eta_star_s: Vec<f64>,
    pub log_eta_u: Vec<f64>,
}

impl PairFile {
    pub fn new(config: &ExperimentConfig, pair: &SchroedingerPair) -> Self {
        let b = pair.boundary();
        Self {
            format: PAIR_FORMAT.into(),
            config_fingerprint: config.fingerprint(),
            problem_fingerprint: config.problem_fingerprint(),
            iterations: b.iterations,
            residual: b.residual,
            history: b.history.clone(),
            log_eta_star_s: b.log_eta_star_s.clone(),
            log_eta_u: b.log_eta_u.clone(),
        }
    }

    /// Rebuilds the pair; the file must come from the same problem.
    pub fn into_pair(self, config: &ExperimentConfig) -> Result<SchroedingerPair> {
        if self.format != PAIR_FORMAT {
            return Err(Error::Artifact(format!("unknown pair format {:?}", self.format)));
        }
        if self.problem_fingerprint != config.problem_fingerprint() {
            return Err(Error::Artifact(
                "pair file was solved for a different grid, potential or boundary data".into(),
            ));
        }
        let propagator = config.propagator()?;
        let tgrid = config.time_grid()?;
        let kernel = propagator.kernel_on(&tgrid)?;
        let boundary = BoundaryPair {
            log_eta_star_s: self.log_eta_star_s,
            log_eta_u: self.log_eta_u,
            residual: self.residual,
            iterations: self.iterations,
            history: self.history,
        };
        Ok(SchroedingerPair::from_boundary(&propagator, &tgrid, kernel, boundary)?)
    }
}

/// `path_id,t,x` rows, one per path and recorded time.
pub fn write_ensemble(path: &Path, fingerprint: &str, ensemble: &PathEnsemble) -> Result<()> {
    let mut out = CsvOutput::create(path, fingerprint, &["path_id", "t", "x"])?;
    let times = ensemble.times();
    for p in ensemble.paths() {
        for (t, x) in times.iter().zip(&p.positions) {
            out.row(&[p.stream.to_string(), t.to_string(), x.to_string()])?;
        }
    }
    out.finish()
}
