//! Vector helpers, the scalar-affine group action, and metrics.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// PSNR reported when two signals are identical.
pub const PSNR_CAP_DB: f64 = 200.0;

/// A finite, nonempty real vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal(Vec<f64>);

impl Signal {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("signal must be nonempty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("signal entry {i} is {}", values[i])));
        }
        Ok(Self(values))
    }

    pub fn constant(n: usize, c: f64) -> Result<Self> {
        Self::new(vec![c; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Signal {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Signal {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Signal::new(v)
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|v| v * s).collect()
}

/// `Px`, where `P = (1/n) 1 1ᵀ`: every entry replaced by the mean.
pub fn mean_project(x: &[f64]) -> Vec<f64> {
    vec![mean(x); x.len()]
}

/// `(I - P)x`: the mean-free part of `x`.
pub fn center(x: &[f64]) -> Vec<f64> {
    let m = mean(x);
    x.iter().map(|v| v - m).collect()
}

/// The group action `g(x) = a x + b 1` for `a > 0`.
pub fn affine_transform(x: &[f64], a: f64, b: f64) -> Result<Vec<f64>> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scale must be positive, got {a}"
        )));
    }
    Ok(x.iter().map(|v| a * v + b).collect())
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("mse of lengths {} and {}", x.len(), y.len())));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &[f64], y: &[f64], peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("peak must be positive, got {peak}")));
    }
    let err = mse(x, y)?;
    if err == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / err).log10()).min(PSNR_CAP_DB))
}

/// `y = x + sigma z` with one standard-normal draw per entry.
pub fn gaussian_corrupt(x: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    x.iter().map(|v| v + sigma * rng.normal()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn mean_project_examples() {
        assert_eq!(mean_project(&[1.0, 2.0, 3.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(mean_project(&[0.7; 4]), vec![0.7; 4]);
    }

    #[test]
    fn center_examples() {
        assert_eq!(center(&[1.0, 2.0, 3.0]), vec![-1.0, 0.0, 1.0]);
        assert_eq!(center(&[4.0; 5]), vec![0.0; 5]);
    }

    #[test]
    fn affine_examples() {
        let x = [0.0, 1.0];
        assert_eq!(affine_transform(&x, 1.0, 0.0).unwrap(), x.to_vec());
        assert_eq!(affine_transform(&x, 0.5, 0.5).unwrap(), vec![0.5, 1.0]);
        assert!(affine_transform(&x, 0.0, 1.0).is_err());
        assert!(affine_transform(&x, -2.0, 1.0).is_err());
    }

    #[test]
    fn psnr_examples() {
        let x = [0.1, 0.2, 0.3];
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
        let y: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let z: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        assert!(psnr(&x, &z, 1.0).unwrap().abs() < 1e-9);
        assert!(psnr(&x, &[0.0], 1.0).is_err());
    }

    #[test]
    fn corrupt_zero_sigma_is_identity() {
        let x = [0.25, -1.0, 3.0];
        let mut r = Rng::new(1);
        assert_eq!(gaussian_corrupt(&x, 0.0, &mut r), x.to_vec());
    }

    #[test]
    fn corrupt_is_deterministic() {
        let x = vec![0.5; 16];
        let a = gaussian_corrupt(&x, 0.3, &mut Rng::new(9));
        let b = gaussian_corrupt(&x, 0.3, &mut Rng::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_variance_monte_carlo() {
        let sigma = 0.7;
        let mut r = Rng::new(2024);
        let n = 100_000;
        let draws = gaussian_corrupt(&vec![0.0; n], sigma, &mut r);
        let m = mean(&draws);
        let var = draws.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / n as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn signal_rejects_non_finite() {
        assert!(Signal::new(vec![1.0, f64::NAN]).is_err());
        assert!(Signal::new(vec![]).is_err());
        assert_eq!(Signal::new(vec![1.0]).unwrap().len(), 1);
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 1..40)
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_orthogonal(x in vec_strategy()) {
            let p = mean_project(&x);
            let pp = mean_project(&p);
            for (a, b) in pp.iter().zip(&p) {
                prop_assert!((a - b).abs() <= 2.0 * x.len() as f64 * f64::EPSILON * b.abs().max(1.0));
            }
            let c = center(&x);
            let eps = f64::EPSILON;
            let n = x.len() as f64;
            prop_assert!(dot(&p, &c).abs() <= 4.0 * n * eps * norm_sq(&x).max(1.0));
            let amax = norm_inf(&x).max(1.0);
            prop_assert!(c.iter().sum::<f64>().abs() <= 4.0 * n * eps * amax);
            for ((ci, pi), xi) in c.iter().zip(&p).zip(&x) {
                prop_assert!((ci + pi - xi).abs() <= 4.0 * eps * amax);
            }
        }

        #[test]
        fn affine_group_action(x in vec_strategy(), a1 in 0.1f64..10.0, b1 in -5.0f64..5.0,
                               a2 in 0.1f64..10.0, b2 in -5.0f64..5.0) {
            let two = affine_transform(&affine_transform(&x, a1, b1).unwrap(), a2, b2).unwrap();
            let one = affine_transform(&x, a1 * a2, a2 * b1 + b2).unwrap();
            for (u, v) in two.iter().zip(&one) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()) * 100.0);
            }
            let back = affine_transform(&affine_transform(&x, a1, b1).unwrap(), 1.0 / a1, -b1 / a1).unwrap();
            for (u, v) in back.iter().zip(&x) {
                prop_assert!((u - v).abs() <= 1e-10 * (1.0 + v.abs()));
            }
        }

        #[test]
        fn psnr_symmetric_and_permutation_invariant(
            pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..30),
            rot in 0usize..30,
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let a = psnr(&x, &y, 1.0).unwrap();
            prop_assert_eq!(a, psnr(&y, &x, 1.0).unwrap());
            let k = rot % x.len();
            let mut xr = x.clone();
            let mut yr = y.clone();
            xr.rotate_left(k);
            yr.rotate_left(k);
            prop_assert!((a - psnr(&xr, &yr, 1.0).unwrap()).abs() < 1e-9);
        }
    }
}
