use rand::Rng;
use rand_distr::StandardNormal;

use super::ClientObjective;
use crate::error::{check_dim, Error, Result};
use crate::linalg::ParamVector;
use crate::rng::RngStream;

/// `f(x) = ½ Σ_k a_k (x_k − b_k)²` with additive Gaussian gradient noise.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticClient {
    a: Vec<f64>,
    b: Vec<f64>,
    sigma: f64,
}

impl QuadraticClient {
    pub fn new(a: Vec<f64>, b: Vec<f64>, sigma: f64) -> Result<Self> {
        check_dim(a.len(), b.len())?;
        if a.is_empty() {
            return Err(Error::invalid("a", "dimension must be positive"));
        }
        if a.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("a", "diagonal entries must be positive"));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid("sigma", format!("must be >= 0, got {sigma}")));
        }
        Ok(Self { a, b, sigma })
    }

    pub fn curvature(&self) -> &[f64] {
        &self.a
    }

    pub fn center(&self) -> &[f64] {
        &self.b
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

impl ClientObjective for QuadraticClient {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(0.5
            * x.iter()
                .zip(&self.a)
                .zip(&self.b)
                .map(|((xk, ak), bk)| ak * (xk - bk) * (xk - bk))
                .sum::<f64>())
    }

    fn full_gradient(&self, x: &[f64]) -> Result<ParamVector> {
        check_dim(self.dim(), x.len())?;
        Ok(x.iter()
            .zip(&self.a)
            .zip(&self.b)
            .map(|((xk, ak), bk)| ak * (xk - bk))
            .collect())
    }

    /// Full gradient plus `σ·z`, `z ~ N(0, I)`; the batch size does not
    /// change the noise level. With `σ = 0` no randomness is drawn.
    fn stochastic_gradient(
        &self,
        x: &[f64],
        _batch_size: usize,
        rng: &mut RngStream,
    ) -> Result<ParamVector> {
        let mut g = self.full_gradient(x)?;
        if self.sigma > 0.0 {
            for gk in &mut g {
                let z: f64 = rng.sample(StandardNormal);
                *gk += self.sigma * z;
            }
        }
        Ok(g)
    }

    fn smoothness(&self) -> Option<f64> {
        Some(self.a.iter().copied().fold(0.0, f64::max))
    }
}
