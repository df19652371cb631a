//! The five subcommands. Each writes its artifacts into the output
//! directory and reports whether every embedded check passed.

use std::path::{Path, PathBuf};

use bernstein_core::dynamics::{backward_drift, forward_drift, PathEnsemble};
use bernstein_core::noether::SymmetryTriple;
use bernstein_core::schroedinger::SchroedingerPair;
use bernstein_core::variational::hjb_from_eta;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{window_slices, Experiment};
use crate::formats::{read_json, write_ensemble, write_json, CsvOutput, PairFile};
use crate::triples;
use crate::verify::{self, Check, Levels, Verdict, VerificationReport};

pub const PAIR_FILE: &str = "pair.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    VerificationFailed,
}

impl Outcome {
    fn of(report: &VerificationReport) -> Self {
        if report.passed() {
            Self::Success
        } else {
            Self::VerificationFailed
        }
    }
}

/// Where and how loudly a command writes.
#[derive(Debug, Clone)]
pub struct Output {
    pub dir: PathBuf,
    pub quiet: bool,
}

impl Output {
    pub fn new(dir: PathBuf, quiet: bool) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, quiet })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn report(&self, report: &VerificationReport) {
        for c in &report.checks {
            let verdict = match c.verdict {
                Verdict::Pass => "PASS",
                Verdict::Fail => "FAIL",
                Verdict::Skipped => "SKIPPED",
            };
            let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4e}"));
            let reason = c.reason.as_deref().map(|r| format!("  ({r})")).unwrap_or_default();
            self.say(format!(
                "{verdict:7} {:40} {} <> {}{reason}",
                c.name,
                num(c.value),
                num(c.tolerance)
            ));
        }
    }
}

fn f(v: f64) -> String {
    v.to_string()
}

/// Loads `pair.json` from the output directory when present.
pub fn existing_pair(config: &ExperimentConfig, out: &Output) -> Result<Option<SchroedingerPair>> {
    let path = out.path(PAIR_FILE);
    if !path.exists() {
        return Ok(None);
    }
    read_json::<PairFile>(&path)?.into_pair(config).map(Some)
}

#[derive(Serialize)]
struct SolveSummary<'a> {
    config_fingerprint: String,
    scenario: &'a str,
    iterations: usize,
    residual: f64,
    history: &'a [f64],
    warnings: &'a [String],
    checks: Vec<Check>,
}

/// Solves the boundary system and writes the pair, marginals and drifts.
pub fn bridge_solve(config: &ExperimentConfig, out: &Output) -> Result<Outcome> {
    let fp = config.fingerprint();
    let bd = config.boundary_densities()?;
    for w in bd.warnings() {
        out.say(format!("warning: {w}"));
    }
    let e = Experiment::solve(config)?;
    let pair = &e.pair;
    write_json(&out.path(PAIR_FILE), &PairFile::new(config, pair))?;

    let grid = pair.grid();
    let tgrid = pair.tgrid();
    let rho = pair.marginals().rho;
    let mut marg = CsvOutput::create(
        &out.path("marginals.csv"),
        &fp,
        &["t", "x", "rho", "log_eta", "log_eta_star"],
    )?;
    let fwd = forward_drift(pair)?;
    let bwd = backward_drift(pair)?;
    let mut drifts = CsvOutput::create(&out.path("drift.csv"), &fp, &["t", "x", "forward", "backward"])?;
    for k in 0..tgrid.n_slices() {
        let t = tgrid.time(k);
        for i in 0..grid.len() {
            let x = grid.point(i);
            marg.row(&[
                f(t),
                f(x),
                f(rho.get(i, k)),
                f(pair.log_eta().get(i, k)),
                f(pair.log_eta_star().get(i, k)),
            ])?;
            drifts.row(&[f(t), f(x), f(fwd.field().get(i, k)), f(bwd.field().get(i, k))])?;
        }
    }
    marg.finish()?;
    drifts.finish()?;

    let checks = verify::solution_checks(&e);
    let summary = SolveSummary {
        config_fingerprint: fp,
        scenario: &config.name,
        iterations: pair.iterations(),
        residual: pair.residual(),
        history: &pair.boundary().history,
        warnings: bd.warnings(),
        checks: checks.clone(),
    };
    write_json(&out.path("solve.json"), &summary)?;
    out.say(format!(
        "{}: converged in {} iterations, marginal residual {:.3e}",
        config.name,
        pair.iterations(),
        pair.residual()
    ));
    let report = VerificationReport::new(config, checks);
    out.report(&report);
    Ok(Outcome::of(&report))
}

#[derive(Serialize)]
struct SimulateSummary {
    config_fingerprint: String,
    paths: usize,
    seed: u64,
    substeps: usize,
    clamped_fraction: f64,
    checks: Vec<Check>,
}

/// Simulates the forward ensemble of a solved pair.
pub fn simulate(config: &ExperimentConfig, pair_file: Option<&Path>, out: &Output) -> Result<Outcome> {
    let path = pair_file.map_or_else(|| out.path(PAIR_FILE), Path::to_path_buf);
    let pair = read_json::<PairFile>(&path)?.into_pair(config)?;
    let e = Experiment::from_pair(config, pair)?;
    let ens = e.forward_ensemble()?;
    let fp = config.fingerprint();
    write_ensemble(&out.path("ensemble.csv"), &fp, &ens)?;
    let (first, last) = window_slices(ens.tgrid(), &e.window())
        .ok_or_else(|| Error::Config("the check window must contain at least two time nodes".into()))?;
    let checks = vec![
        Check::at_most("clamp_fraction", ens.clamped_fraction(), verify::CLAMP_TOL),
        verify::marginal_check(&e, &ens, (first + last) / 2),
    ];
    write_json(
        &out.path("simulate.json"),
        &SimulateSummary {
            config_fingerprint: fp,
            paths: ens.len(),
            seed: config.seed,
            substeps: config.ensemble.substeps,
            clamped_fraction: ens.clamped_fraction(),
            checks: checks.clone(),
        },
    )?;
    out.say(format!("{}: simulated {} paths", config.name, ens.len()));
    let report = VerificationReport::new(config, checks);
    out.report(&report);
    Ok(Outcome::of(&report))
}

/// Runs the full invariant suite.
pub fn verify(config: &ExperimentConfig, out: &Output) -> Result<Outcome> {
    let report = verify::verify(config, existing_pair(config, out)?)?;
    write_json(&out.path("report.json"), &report)?;
    out.report(&report);
    Ok(Outcome::of(&report))
}

/// Checks the given triples, or the configured ones, on the scenario.
pub fn noether(config: &ExperimentConfig, chosen: &[SymmetryTriple], out: &Output) -> Result<Outcome> {
    let triples = if chosen.is_empty() {
        let spec = config
            .noether
            .as_ref()
            .ok_or_else(|| Error::Config("no triples given and no noether block".into()))?;
        spec.triples
            .iter()
            .map(|n| triples::lookup(n))
            .collect::<Result<Vec<_>>>()?
    } else {
        chosen.to_vec()
    };
    let levels = Levels::solve(config, existing_pair(config, out)?)?;
    let e = &levels.fine;
    let ens = e.forward_ensemble()?;
    let fp = config.fingerprint();
    let mut csv = CsvOutput::create(&out.path("noether.csv"), &fp, &["triple", "t", "mean", "se"])?;
    let mut checks = Vec::new();
    for t in &triples {
        checks.extend(verify::noether_checks(t, &levels, &ens));
        if let Ok(means) = charge_means(t, e, &ens) {
            for (time, m, se) in means {
                csv.row(&[t.name.clone(), f(time), f(m), f(se)])?;
            }
        }
    }
    csv.finish()?;
    let report = VerificationReport::new(config, checks);
    write_json(&out.path("noether.json"), &report)?;
    out.report(&report);
    Ok(Outcome::of(&report))
}

fn charge_means(triple: &SymmetryTriple, e: &Experiment, ens: &PathEnsemble) -> Result<Vec<(f64, f64, f64)>> {
    let params = e.config.noether.as_ref().map(|n| n.params.clone()).unwrap_or_default();
    let b = triples::bindings(e.hbar(), &e.potential, &params);
    let energy = bernstein_core::variational::energy_field(e.forward.field(), &e.potential, e.hbar());
    let charge =
        bernstein_core::noether::noether_charge(triple, e.forward.field(), &energy, &b, e.forward.provenance())?;
    Ok((0..ens.tgrid().n_slices())
        .map(|k| {
            let est = ens.mean_at(k, |x, t| charge.value(x, t));
            (ens.tgrid().time(k), est.value, est.se)
        })
        .collect())
}

#[derive(Serialize)]
struct ValueBoundLine {
    perturbation: String,
    j_hat: f64,
    se: f64,
    value: f64,
    passed: bool,
}

#[derive(Serialize)]
struct HjbSummary {
    #[serde(flatten)]
    report: VerificationReport,
    value_bound: Vec<ValueBoundLine>,
}

/// Value function, optimal drift and the control checks.
pub fn hjb(config: &ExperimentConfig, out: &Output) -> Result<Outcome> {
    let levels = Levels::solve(config, existing_pair(config, out)?)?;
    let e = &levels.fine;
    let hjb = hjb_from_eta(&e.pair)?;
    let drift = hjb.optimal_drift()?;
    let fp = config.fingerprint();
    let mut csv = CsvOutput::create(&out.path("value_function.csv"), &fp, &["t", "x", "S", "optimal_drift"])?;
    let (grid, tgrid) = (e.pair.grid(), e.pair.tgrid());
    for k in 0..tgrid.n_slices() {
        for i in 0..grid.len() {
            csv.row(&[
                f(tgrid.time(k)),
                f(grid.point(i)),
                f(hjb.value().get(i, k)),
                f(drift.field().get(i, k)),
            ])?;
        }
    }
    csv.finish()?;
    let (checks, bound) = verify::hjb_checks(&levels);
    let rows = match bound {
        Some(r) => r
            .rows
            .iter()
            .map(|row| ValueBoundLine {
                perturbation: row.label(),
                j_hat: row.j_hat.value,
                se: row.j_hat.se,
                value: row.value,
                passed: row.passed,
            })
            .collect(),
        None => Vec::new(),
    };
    let report = VerificationReport::new(config, checks);
    out.report(&report);
    let outcome = Outcome::of(&report);
    write_json(
        &out.path("hjb.json"),
        &HjbSummary {
            report,
            value_bound: rows,
        },
    )?;
    Ok(outcome)
}
