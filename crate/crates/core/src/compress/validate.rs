//! Monte-Carlo and exhaustive checks of the ω / q² guarantees.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{apply, contraction_q2, omega, CompressorSpec};
use crate::error::{Error, Result};
use crate::linalg::{dist_sq, norm_sq};
use crate::rng::RngStream;

pub const MIN_UNBIASED_TRIALS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct UnbiasedReport {
    pub omega: f64,
    pub trials: usize,
    /// `‖mean(C(x)) − x‖∞`
    pub mean_error: f64,
    /// Largest `|mean_k − x_k| / band_k` over coordinates; > 1 fails.
    pub worst_band_fraction: f64,
    /// `mean ‖C(x) − x‖² / ‖x‖²`
    pub variance_ratio: f64,
    /// `ω (1 + 3/√trials)`
    pub variance_bound: f64,
    pub mean_ok: bool,
    pub variance_ok: bool,
}

impl UnbiasedReport {
    pub fn passed(&self) -> bool {
        self.mean_ok && self.variance_ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractiveReport {
    pub q2: f64,
    pub trials: usize,
    pub max_ratio: f64,
    pub mean_ratio: f64,
    /// Deterministic operators must satisfy `ratio ≤ q²` on every vector;
    /// randomized ones are judged on the mean ratio.
    pub deterministic: bool,
    pub bound: f64,
    pub passed: bool,
}

/// Draws one Gaussian test vector from `rng` and runs [`validate_unbiased_at`].
pub fn validate_unbiased(
    spec: &CompressorSpec,
    d: usize,
    trials: usize,
    rng: &mut RngStream,
) -> Result<UnbiasedReport> {
    let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    validate_unbiased_at(spec, &x, trials, rng)
}

pub fn validate_unbiased_at(
    spec: &CompressorSpec,
    x: &[f64],
    trials: usize,
    rng: &mut RngStream,
) -> Result<UnbiasedReport> {
    let d = x.len();
    if !spec.is_unbiased() {
        return Err(Error::Unsupported(format!(
            "{} is not an unbiased operator",
            spec.name()
        )));
    }
    if trials < MIN_UNBIASED_TRIALS {
        return Err(Error::invalid(
            "trials",
            format!("need at least {MIN_UNBIASED_TRIALS}, got {trials}"),
        ));
    }
    let w = omega(spec, d)?;
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut err_total = 0.0;
    for _ in 0..trials {
        let y = apply(spec, x, rng)?;
        for k in 0..d {
            let dev = y[k] - x[k];
            sum[k] += dev;
            sum_sq[k] += dev * dev;
        }
        err_total += dist_sq(&y, x);
    }
    let n = trials as f64;
    let mut mean_error = 0.0f64;
    let mut worst = 0.0f64;
    for k in 0..d {
        let mean_dev = sum[k] / n;
        let var = ((sum_sq[k] - n * mean_dev * mean_dev) / (n - 1.0)).max(0.0);
        // a few ulps of slack for coordinates whose decode is a constant
        // rounding of x_k
        let band = 4.0 * var.sqrt() / n.sqrt() + 8.0 * f64::EPSILON * x[k].abs();
        let dev = mean_dev.abs();
        mean_error = mean_error.max(dev);
        let frac = if band > 0.0 {
            dev / band
        } else if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(frac);
    }
    let xn = norm_sq(x);
    let variance_ratio = if xn > 0.0 { err_total / n / xn } else { 0.0 };
    let variance_bound = w * (1.0 + 3.0 / n.sqrt());
    Ok(UnbiasedReport {
        omega: w,
        trials,
        mean_error,
        worst_band_fraction: worst,
        variance_ratio,
        variance_bound,
        mean_ok: worst <= 1.0,
        variance_ok: variance_ratio <= variance_bound,
    })
}

/// `‖C(x) − x‖² / ‖x‖²` for one draw; 0 for the zero vector.
pub fn contraction_ratio(spec: &CompressorSpec, x: &[f64], rng: &mut RngStream) -> Result<f64> {
    let y = apply(spec, x, rng)?;
    let xn = norm_sq(x);
    Ok(if xn > 0.0 { dist_sq(&y, x) / xn } else { 0.0 })
}

/// Test vector family cycling through generic Gaussian vectors, small
/// integers (ties and zeros), sparse Gaussian vectors and constant-magnitude
/// sign vectors (where Top-r is tight).
fn test_vector(j: usize, d: usize, rng: &mut RngStream) -> Vec<f64> {
    match j % 4 {
        0 => (0..d).map(|_| rng.sample(StandardNormal)).collect(),
        1 => (0..d).map(|_| f64::from(rng.random_range(-3i32..=3))).collect(),
        2 => (0..d)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                if rng.random::<bool>() {
                    v
                } else {
                    0.0
                }
            })
            .collect(),
        _ => (0..d)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect(),
    }
}

pub fn validate_contractive(
    spec: &CompressorSpec,
    d: usize,
    trials: usize,
    rng: &mut RngStream,
) -> Result<ContractiveReport> {
    let q2 = contraction_q2(spec, d)?;
    if trials == 0 {
        return Err(Error::invalid("trials", "need at least one trial"));
    }
    let deterministic = spec.is_deterministic();
    let mut max_ratio = 0.0f64;
    let mut total = 0.0;
    for j in 0..trials {
        let x = test_vector(j, d, rng);
        let r = contraction_ratio(spec, &x, rng)?;
        max_ratio = max_ratio.max(r);
        total += r;
    }
    let mean_ratio = total / trials as f64;
    let (bound, passed) = if deterministic {
        (q2, max_ratio <= q2)
    } else {
        let b = q2 * (1.0 + 3.0 / (trials as f64).sqrt());
        (b, mean_ratio <= b)
    };
    Ok(ContractiveReport {
        q2,
        trials,
        max_ratio,
        mean_ratio,
        deterministic,
        bound,
        passed,
    })
}
