//! The one-dimensional split normal distribution and the closed-form
//! proximal operator of its scaled negative log-density.
//!
//! ```text
//! p(x) = sqrt(2) / (sqrt(pi) (s1 + s2)) * exp(-(x - mu)^2 / (2 s_i^2))
//! ```
//! with `s_i = s1` left of the mode and `s2` right of it.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitNormalParams {
    mu: f64,
    sigma1: f64,
    sigma2: f64,
}

impl SplitNormalParams {
    pub fn new(mu: f64, sigma1: f64, sigma2: f64) -> Result<Self> {
        if !(sigma1 > 0.0 && sigma2 > 0.0) || !mu.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "split normal needs finite mu and positive scales, got ({mu}, {sigma1}, {sigma2})"
            )));
        }
        Ok(Self { mu, sigma1, sigma2 })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma1(&self) -> f64 {
        self.sigma1
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Probability mass left of the mode.
    pub fn left_mass(&self) -> f64 {
        self.sigma1 / (self.sigma1 + self.sigma2)
    }

    fn scale_at(&self, x: f64) -> f64 {
        if x < self.mu {
            self.sigma1
        } else {
            self.sigma2
        }
    }
}

/// Branch selection with probability `s1/(s1+s2)`, then a half-normal draw.
pub fn split_normal_sample(p: &SplitNormalParams, rng: &mut Rng) -> f64 {
    let left = rng.uniform() < p.left_mass();
    let half = rng.normal().abs();
    if left {
        p.mu - p.sigma1 * half
    } else {
        p.mu + p.sigma2 * half
    }
}

/// `prox_{-lambda log p}(x)`.
pub fn split_normal_prox_oracle(x: f64, lambda: f64, p: &SplitNormalParams) -> f64 {
    let s2 = p.scale_at(x).powi(2);
    (lambda * p.mu + s2 * x) / (lambda + s2)
}

pub fn split_normal_neglogpdf(x: f64, p: &SplitNormalParams) -> f64 {
    let norm = (2.0f64).sqrt() / (std::f64::consts::PI.sqrt() * (p.sigma1 + p.sigma2));
    let s = p.scale_at(x);
    -norm.ln() + (x - p.mu).powi(2) / (2.0 * s * s)
}
