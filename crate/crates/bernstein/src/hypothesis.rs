//! Classical hypothesis tests on ensemble slices.

use bernstein_core::dynamics::GridDensity;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub dof: f64,
    pub p_value: f64,
}

impl TestOutcome {
    pub fn passes(&self, level: f64) -> bool {
        self.p_value >= level
    }
}

fn chi_squared(dof: f64) -> ChiSquared {
    ChiSquared::new(dof).expect("degrees of freedom are positive")
}

/// Pearson goodness of fit with `bins` equal-probability bins of `density`.
pub fn chi_square_gof(samples: &[f64], density: &GridDensity, bins: usize) -> TestOutcome {
    assert!(bins >= 2, "need at least two bins");
    let mut counts = vec![0usize; bins];
    for &x in samples {
        let b = (density.cdf(x) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let expected = samples.len() as f64 / bins as f64;
    let statistic = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dof = (bins - 1) as f64;
    TestOutcome {
        statistic,
        dof,
        p_value: chi_squared(dof).sf(statistic),
    }
}

/// Two-sided test of `Var = expected` using `(n - 1) s^2 / expected`.
pub fn variance_ratio_test(samples: &[f64], expected: f64) -> TestOutcome {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let s2 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let dof = n - 1.0;
    let statistic = dof * s2 / expected;
    let dist = chi_squared(dof);
    let tail = dist.cdf(statistic).min(dist.sf(statistic));
    TestOutcome {
        statistic,
        dof,
        p_value: (2.0 * tail).min(1.0),
    }
}
