//! Finite-difference helpers for verifying backward rules.

use crate::array::Array;

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` of a scalar function.
pub fn central_difference(mut f: impl FnMut(&Array) -> f64, at: &Array, index: usize, h: f64) -> f64 {
    let mut plus = at.clone();
    plus.data_mut()[index] += h;
    let mut minus = at.clone();
    minus.data_mut()[index] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|)`, with differences below `floor` in both magnitudes counted as zero.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < floor {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
