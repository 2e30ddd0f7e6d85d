//! Denoising losses on a single (estimate, target) pair.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Loss {
    /// Mean absolute error over entries.
    L1,
    /// Half mean squared error over entries.
    L2,
    /// `1 - (pi gamma^2)^(-n/2) exp(-|r|^2 / gamma^2)`.
    ProximalMatching { gamma: f64 },
    /// `1 - exp(-|r|^2 / gamma^2)`: proximal matching without its normalizing
    /// constant. A positive affine transform of `ProximalMatching` with the
    /// same minimizers; used for optimization when the constant underflows.
    MatchingKernel { gamma: f64 },
}

impl Loss {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Loss::ProximalMatching { gamma } | Loss::MatchingKernel { gamma } => {
                if gamma > 0.0 && gamma.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")))
                }
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Loss::L1 => "l1",
            Loss::L2 => "l2",
            Loss::ProximalMatching { .. } => "proximal-matching",
            Loss::MatchingKernel { .. } => "matching-kernel",
        }
    }

    pub fn value(&self, x_hat: &[f64], x: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(x_hat, x)?.0)
    }

    /// Loss value and its gradient with respect to `x_hat`.
    pub fn value_and_grad(&self, x_hat: &[f64], x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.validate()?;
        if x_hat.len() != x.len() {
            return Err(Error::Shape(format!(
                "loss between lengths {} and {}",
                x_hat.len(),
                x.len()
            )));
        }
        let n = x.len() as f64;
        let r: Vec<f64> = x_hat.iter().zip(x).map(|(a, b)| a - b).collect();
        Ok(match *self {
            Loss::L1 => {
                let v = r.iter().map(|t| t.abs()).sum::<f64>() / n;
                // sign(0) = 0 subgradient
                let g = r.iter().map(|&t| if t > 0.0 { 1.0 / n } else if t < 0.0 { -1.0 / n } else { 0.0 }).collect();
                (v, g)
            }
            Loss::L2 => {
                let v = 0.5 * r.iter().map(|t| t * t).sum::<f64>() / n;
                (v, r.iter().map(|t| t / n).collect())
            }
            Loss::ProximalMatching { gamma } => {
                let g2 = gamma * gamma;
                let r2: f64 = r.iter().map(|t| t * t).sum();
                let log_norm = -0.5 * n * (std::f64::consts::PI * g2).ln();
                let k = (log_norm - r2 / g2).exp();
                (1.0 - k, r.iter().map(|t| k * 2.0 * t / g2).collect())
            }
            Loss::MatchingKernel { gamma } => {
                let g2 = gamma * gamma;
                let r2: f64 = r.iter().map(|t| t * t).sum();
                let k = (-r2 / g2).exp();
                (1.0 - k, r.iter().map(|t| k * 2.0 * t / g2).collect())
            }
        })
    }
}

pub fn l1_loss(x_hat: &[f64], x: &[f64]) -> Result<f64> {
    Loss::L1.value(x_hat, x)
}

pub fn l2_loss(x_hat: &[f64], x: &[f64]) -> Result<f64> {
    Loss::L2.value(x_hat, x)
}

pub fn prox_matching_loss(x_hat: &[f64], x: &[f64], gamma: f64) -> Result<f64> {
    Loss::ProximalMatching { gamma }.value(x_hat, x)
}
