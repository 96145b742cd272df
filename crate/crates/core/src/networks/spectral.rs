//! Power-iteration estimate of the largest singular value.

use uqgan_autograd::Array;

use crate::error::{Error, Result};

/// Lower clamp applied to sigma and to vector norms.
pub const SIGMA_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct PowerStep {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma: f64,
}

fn normalized(v: Vec<f64>) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = norm.max(SIGMA_EPS);
    (v.into_iter().map(|x| x / d).collect(), norm)
}

/// One iteration on a row-major `rows x cols` matrix:
/// `v = normalize(Wᵀu)`, `u' = normalize(Wv)`, `sigma = u'ᵀWv`.
///
/// A zero matrix leaves `u` untouched and reports `sigma = 0`.
pub fn power_step(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> PowerStep {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(u.len(), rows);
    let mut wt_u = vec![0.0; cols];
    for (r, &ur) in u.iter().enumerate() {
        for (acc, &x) in wt_u.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *acc += ur * x;
        }
    }
    let (v, _) = normalized(wt_u);
    let wv: Vec<f64> = (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum())
        .collect();
    let (u_next, norm) = normalized(wv.clone());
    if norm < SIGMA_EPS {
        return PowerStep {
            u: u.to_vec(),
            v,
            sigma: 0.0,
        };
    }
    let sigma = u_next.iter().zip(&wv).map(|(a, b)| a * b).sum();
    PowerStep { u: u_next, v, sigma }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNorm {
    pub weight: Array,
    pub u: Vec<f64>,
    pub sigma: f64,
}

/// Divides a 2-D weight by its power-iteration estimate of sigma_max.
///
/// Sigma is clamped below at [`SIGMA_EPS`], so an all-zero weight comes back unchanged.
pub fn spectral_normalize(weight: &Array, u: &[f64], n_iters: usize) -> Result<SpectralNorm> {
    if weight.ndim() != 2 {
        return Err(Error::Shape(format!(
            "spectral normalization expects a 2-D weight, got {:?}",
            weight.shape()
        )));
    }
    let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
    if u.len() != rows {
        return Err(Error::Shape(format!("u has length {}, weight has {rows} rows", u.len())));
    }
    let u_norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (u_norm - 1.0).abs() > 1e-6 {
        return Err(Error::Shape(format!("u must be unit-norm, has norm {u_norm}")));
    }
    if n_iters == 0 {
        return Err(Error::Config("power iteration needs at least one step".into()));
    }
    let mut step = power_step(weight.data(), rows, cols, u);
    for _ in 1..n_iters {
        step = power_step(weight.data(), rows, cols, &step.u);
    }
    let sigma = step.sigma.max(SIGMA_EPS);
    Ok(SpectralNorm {
        weight: weight.map(|x| x / sigma),
        u: step.u,
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: usize) -> Vec<f64> {
        let s = (n as f64).sqrt();
        vec![1.0 / s; n]
    }

    #[test]
    fn diagonal_weight() {
        let w = Array::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, 1.0]);
        let sn = spectral_normalize(&w, &unit(2), 50).unwrap();
        assert!((sn.sigma - 2.0).abs() < 1e-9);
        for (got, want) in sn.weight.data().iter().zip([1.0, 0.0, 0.0, 0.5]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_weight_is_unchanged() {
        let w = Array::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let sn = spectral_normalize(&w, &unit(3), 3).unwrap();
        assert!((sn.sigma - 1.0).abs() < 1e-12);
        for (a, b) in sn.weight.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_weight() {
        let sn = spectral_normalize(&Array::from_vec(&[1, 1], vec![3.0]), &[1.0], 1).unwrap();
        assert_eq!(sn.sigma, 3.0);
        assert_eq!(sn.weight.data(), &[1.0]);
    }

    #[test]
    fn zero_weight_clamps_sigma() {
        let w = Array::zeros(&[2, 3]);
        let sn = spectral_normalize(&w, &unit(2), 2).unwrap();
        assert_eq!(sn.sigma, SIGMA_EPS);
        assert!(sn.weight.data().iter().all(|&x| x == 0.0));
        assert_eq!(sn.u, unit(2));
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = Array::zeros(&[2, 2]);
        assert!(spectral_normalize(&w, &[1.0, 1.0], 1).is_err());
        assert!(spectral_normalize(&w, &unit(2), 0).is_err());
        assert!(spectral_normalize(&Array::zeros(&[2, 2, 1]), &unit(2), 1).is_err());
    }
}
