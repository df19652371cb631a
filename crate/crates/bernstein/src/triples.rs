//! Symmetry triple files: JSON objects `{name, T, Q, phi}` with expression
//! strings in `x`, `t` and named parameters.

use std::path::Path;

use bernstein_core::expr::Bindings;
use bernstein_core::noether::SymmetryTriple;
use bernstein_core::Potential;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::read_json;

const SHIPPED: &str = include_str!("../data/triples.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripleSource {
    pub name: String,
    #[serde(rename = "T")]
    pub t: String,
    #[serde(rename = "Q")]
    pub q: String,
    pub phi: String,
}

impl TripleSource {
    pub fn to_triple(&self) -> Result<SymmetryTriple> {
        Ok(SymmetryTriple::parse(&self.name, &self.t, &self.q, &self.phi)?)
    }
}

/// The shipped catalog.
pub fn shipped() -> Vec<TripleSource> {
    serde_json::from_str(SHIPPED).expect("shipped triple catalog is valid JSON")
}

pub fn lookup(name: &str) -> Result<SymmetryTriple> {
    shipped()
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Config(format!("no triple named {name:?} in the catalog")))?
        .to_triple()
}

/// A single triple object or an array of them.
pub fn load(path: &Path) -> Result<Vec<SymmetryTriple>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(TripleSource),
        Many(Vec<TripleSource>),
    }
    let sources = match read_json::<OneOrMany>(path)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    };
    sources.iter().map(TripleSource::to_triple).collect()
}

/// `hbar`, `omega` for harmonic potentials, then the user parameters.
pub fn bindings<'a>(
    hbar: f64,
    potential: &Potential,
    params: impl IntoIterator<Item = (&'a String, &'a f64)>,
) -> Bindings {
    let mut b = Bindings::new().with("hbar", hbar);
    if let Some(w) = potential.harmonic_frequency() {
        b.set("omega", w);
    }
    for (k, v) in params {
        b.set(k, *v);
    }
    b
}
