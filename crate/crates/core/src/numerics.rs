//! Small log-domain and interpolation helpers shared across modules.

use num_traits::Float;

/// `log(sum(exp(v)))` over an iterator, stable for very negative inputs.
///
/// Returns `-inf` for an empty input or when every term is `-inf`.
pub fn log_sum_exp<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64> + Clone,
{
    let max = values
        .clone()
        .into_iter()
        .fold(f64::NEG_INFINITY, |m, v| if v > m { v } else { m });
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.into_iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `log_sum_exp` over a slice, two passes without cloning an iterator.
pub fn log_sum_exp_slice(values: &[f64]) -> f64 {
    log_sum_exp(values.iter().copied())
}

/// Natural log that maps zero to `-inf` and rejects negatives with NaN.
#[inline]
pub fn ln_or_neg_inf(v: f64) -> f64 {
    if v == 0.0 {
        f64::NEG_INFINITY
    } else {
        v.ln()
    }
}

/// Catmull-Rom cubic interpolation on uniformly spaced samples.
///
/// `pos` is a fractional index into `values`.
pub fn cubic_interpolate(values: &[f64], pos: f64) -> f64 {
    let n = values.len();
    debug_assert!(n >= 2);
    let max_cell = (n - 2) as f64;
    let p = pos.clamp(0.0, (n - 1) as f64);
    let cell = p.floor().min(max_cell);
    let i = cell as usize;
    let f = p - cell;
    let p1 = values[i];
    let p2 = values[i + 1];
    // Missing end neighbours come from the quadratic through the three
    // nearest samples.
    let p0 = match i {
        0 if n >= 3 => 3.0 * p1 - 3.0 * p2 + values[2],
        0 => 2.0 * p1 - p2,
        _ => values[i - 1],
    };
    let p3 = if i + 2 < n {
        values[i + 2]
    } else if i >= 1 {
        3.0 * p2 - 3.0 * p1 + values[i - 1]
    } else {
        2.0 * p2 - p1
    };
    let f2 = f * f;
    let f3 = f2 * f;
    0.5 * ((2.0 * p1)
        + (-p0 + p2) * f
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * f2
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * f3)
}

/// FNV-1a over the bit patterns of a sequence of floats.
pub(crate) fn fingerprint(parts: &[&[f64]]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for v in part.iter() {
            for byte in v.to_bits().to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        hash ^= 0xff;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
