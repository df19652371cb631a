//! Locations of the shipped scenarios and fixtures checked by the
//! `acceptance` test target.

use std::path::{Path, PathBuf};

use bernstein::{ExperimentConfig, Result};

pub const SCENARIOS: [&str; 6] = [
    "example1",
    "bridge",
    "harmonic",
    "symmetric",
    "free_scaling",
    "corrupted_drift",
];

fn shipped_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../bernstein")
}

pub fn scenario(name: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&shipped_dir().join("scenarios").join(format!("{name}.json")))
}

pub fn fixture(name: &str) -> PathBuf {
    shipped_dir().join("data/fixtures").join(format!("{name}.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scenario_loads() {
        for name in SCENARIOS {
            assert_eq!(scenario(name).unwrap().name, name);
        }
        assert!(fixture("boost_without_phi").is_file());
    }
}
