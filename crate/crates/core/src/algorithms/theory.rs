//! Step-size and scaling recipes from the convergence guarantees of the
//! compressed methods.

use std::f64::consts::E;

use crate::error::{Error, Result};

/// Dimensionless parameter recipe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryParams {
    /// Upper bound on `η_l·K·L`.
    pub local_rate_kl_bound: f64,
    /// Prescribed `η_g·η_l·K·L`.
    pub global_step_kl: f64,
    /// `α` for SCALLION, `β` for SCAFCOM.
    pub factor: f64,
}

impl TheoryParams {
    /// Largest admissible `η_l`.
    pub fn eta_l_max(&self, local_steps: usize, smoothness: f64) -> f64 {
        self.local_rate_kl_bound / (local_steps as f64 * smoothness)
    }

    /// `η_g·η_l·K`.
    pub fn global_step(&self, smoothness: f64) -> f64 {
        self.global_step_kl / smoothness
    }

    /// `η_g` that realizes the prescribed product for a given `η_l`.
    pub fn eta_g(&self, eta_l: f64, local_steps: usize, smoothness: f64) -> f64 {
        self.global_step_kl / (smoothness * eta_l * local_steps as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemScale {
    pub smoothness: f64,
    /// `f(x⁰) − min f`
    pub delta: f64,
    pub sigma: f64,
    pub clients: usize,
    pub sampled: usize,
    pub local_steps: usize,
    pub rounds: usize,
}

impl ProblemScale {
    fn check(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must be positive, got {v}")))
            }
        };
        pos("L", self.smoothness)?;
        pos("Delta", self.delta)?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma", "must be finite and >= 0"));
        }
        for (name, v) in [
            ("N", self.clients),
            ("S", self.sampled),
            ("K", self.local_steps),
            ("T", self.rounds),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if self.sampled > self.clients {
            return Err(Error::invalid("S", "cannot exceed N"));
        }
        Ok(())
    }

    /// `T σ² / (K L Δ)`, the common noise-to-progress ratio.
    fn noise(&self) -> f64 {
        self.rounds as f64 * self.sigma * self.sigma
            / (self.local_steps as f64 * self.smoothness * self.delta)
    }
}

/// SCALLION recipe for an `ω`-unbiased compressor.
pub fn scallion_theory_params(p: &ProblemScale, omega: f64) -> Result<TheoryParams> {
    p.check()?;
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(Error::invalid("omega", "must be finite and >= 0"));
    }
    let (n, s) = (p.clients as f64, p.sampled as f64);
    let w1 = 1.0 + omega;
    let noise = p.noise();
    let alpha = 1.0 / (4.0 * w1 + (w1 * s * noise / (n * n)).sqrt() + (w1 * noise / n).cbrt());
    Ok(TheoryParams {
        local_rate_kl_bound: (alpha * w1 / (1400.0 * E * E * n)).sqrt(),
        global_step_kl: 27.0 * alpha * s / n,
        factor: alpha,
    })
}

/// SCAFCOM recipe for a `q²`-contractive compressor (takes `q`, not `q²`).
pub fn scafcom_theory_params(p: &ProblemScale, q: f64) -> Result<TheoryParams> {
    p.check()?;
    if !(0.0..1.0).contains(&q) {
        return Err(Error::invalid("q", format!("need 0 <= q < 1, got {q}")));
    }
    let (n, s) = (p.clients as f64, p.sampled as f64);
    let gap = 1.0 - q;
    let noise = s * p.noise();
    let beta = 1.0
        / (1.0
            + (noise / (n * n)).sqrt()
            + (noise / (n * gap)).cbrt()
            + (noise / (n * gap * gap)).powf(0.25));
    let bound = (beta * gap * gap
        / (36.0 * E * E * n * (189.0 * gap * gap + 306.0 * beta * beta)))
        .sqrt();
    Ok(TheoryParams {
        local_rate_kl_bound: bound,
        global_step_kl: 1.0 / (20.0 * n / (beta * s) + 28.0 * n / (gap * s)),
        factor: beta,
    })
}
