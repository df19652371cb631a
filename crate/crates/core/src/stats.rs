//! Monte Carlo summaries.

use alloc::vec::Vec;

use num_traits::Float;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut acc = Welford::default();
        for &v in samples {
            acc.push(v);
        }
        acc.estimate()
    }

    /// `|value - target| <= k * se`, with an absolute floor for exact cases.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.se + 1e-12 * (1.0 + target.abs())
    }

    /// Distance to `target` in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        let diff = self.value - target;
        if self.se > 0.0 {
            diff / self.se
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(diff)
        }
    }
}

/// Streaming mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        let delta = v - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn estimate(&self) -> Estimate {
        let se = if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        };
        Estimate {
            value: self.mean,
            se,
            n: self.n,
        }
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    sxy / sxx
}

/// Weights `c_k` such that `ols_slope(xs, ys) = sum c_k y_k`.
pub fn ols_slope_weights(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    xs.iter().map(|x| (x - mx) / sxx).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let data = [1.0, 4.0, 2.5, -3.0, 7.25];
        let e = Estimate::from_samples(&data);
        let mean = data.iter().sum::<f64>() / 5.0;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((e.value - mean).abs() < 1e-14);
        assert!((e.se - (var / 5.0).sqrt()).abs() < 1e-14);
        assert_eq!(e.n, 5);
    }

    #[test]
    fn slope_of_a_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
        assert!((ols_slope(&xs, &ys) + 0.5).abs() < 1e-15);
        let w = ols_slope_weights(&xs);
        let via_weights: f64 = w.iter().zip(&ys).map(|(a, b)| a * b).sum();
        assert!((via_weights + 0.5).abs() < 1e-15);
    }

    #[test]
    fn within_and_z_score() {
        let e = Estimate {
            value: 1.0,
            se: 0.1,
            n: 100,
        };
        assert!(e.within(1.25, 3.0));
        assert!(!e.within(1.35, 3.0));
        assert!((e.z_score(0.8) - 2.0).abs() < 1e-12);
        let exact = Estimate {
            value: 0.0,
            se: 0.0,
            n: 10,
        };
        assert!(exact.within(0.0, 3.0));
        assert_eq!(exact.z_score(0.0), 0.0);
    }
}
