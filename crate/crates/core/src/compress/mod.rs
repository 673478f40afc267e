//! Uplink compression operators and their codecs.
//!
//! Unbiased operators (`E[C(x)] = x`, `E‖C(x) − x‖² ≤ ω‖x‖²`): identity,
//! random-s sparsification, random dithering. Contractive operators
//! (`E‖C(x) − x‖² ≤ q²‖x‖²`): Top-r, grouped sign, and any unbiased operator
//! scaled by `1/(1+ω)`.

mod message;
mod validate;

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;

pub use message::CompressedMessage;
pub use validate::{
    contraction_ratio, validate_contractive, validate_unbiased, validate_unbiased_at,
    ContractiveReport, UnbiasedReport, MIN_UNBIASED_TRIALS,
};

use crate::error::{check_dim, Error, Result};
use crate::rng::RngStream;

/// Largest supported dithering depth; levels are stored as `u32`.
pub const MAX_DITHER_BITS: u32 = 30;

/// Disjoint index groups covering `0..d`, shared by sender and receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    groups: Arc<Vec<Vec<usize>>>,
    dim: usize,
}

impl Partition {
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::invalid("partition", "no groups"));
        }
        let dim: usize = groups.iter().map(Vec::len).sum();
        let mut seen = vec![false; dim];
        for (m, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::invalid("partition", format!("group {m} is empty")));
            }
            for &k in g {
                if k >= dim || seen[k] {
                    return Err(Error::invalid(
                        "partition",
                        format!("index {k} in group {m} is out of range or repeated"),
                    ));
                }
                seen[k] = true;
            }
        }
        Ok(Self {
            groups: Arc::new(groups),
            dim,
        })
    }

    /// `m` contiguous groups whose sizes differ by at most one.
    pub fn contiguous(dim: usize, m: usize) -> Result<Self> {
        if m == 0 || m > dim {
            return Err(Error::invalid(
                "groups",
                format!("need 1 <= groups <= d = {dim}, got {m}"),
            ));
        }
        let base = dim / m;
        let extra = dim % m;
        let mut start = 0;
        let groups = (0..m)
            .map(|g| {
                let len = base + usize::from(g < extra);
                let out: Vec<usize> = (start..start + len).collect();
                start += len;
                out
            })
            .collect();
        Self::new(groups)
    }

    /// Contiguous groups with the given lengths (e.g. network layers).
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let groups = sizes
            .iter()
            .map(|&len| {
                let g: Vec<usize> = (start..start + len).collect();
                start += len;
                g
            })
            .collect();
        Self::new(groups)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn max_group_len(&self) -> usize {
        self.groups.iter().map(Vec::len).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompressorSpec {
    Identity,
    /// Keep `s` uniformly chosen coordinates, scaled by `d/s`.
    RandomSparsify { s: usize },
    /// Stochastic rounding of `|x_k|/‖x‖` onto a grid of `2^bits` steps.
    RandomDither { bits: u32 },
    /// Keep the `⌈r·d⌉` largest-magnitude coordinates.
    TopR { r: f64 },
    /// Per-group mean absolute value times the sign pattern.
    GroupedSign { partition: Partition },
    /// An unbiased operator multiplied by `1/(1+ω)`.
    ScaledUnbiased(Box<CompressorSpec>),
}

impl CompressorSpec {
    pub fn scaled(inner: CompressorSpec) -> Self {
        CompressorSpec::ScaledUnbiased(Box::new(inner))
    }

    pub fn name(&self) -> String {
        match self {
            CompressorSpec::Identity => "identity".into(),
            CompressorSpec::RandomSparsify { s } => format!("rand-{s}"),
            CompressorSpec::RandomDither { bits } => format!("dither-{bits}b"),
            CompressorSpec::TopR { r } => format!("top-{r}"),
            CompressorSpec::GroupedSign { partition } => {
                format!("sign-{}g", partition.groups().len())
            }
            CompressorSpec::ScaledUnbiased(inner) => format!("scaled-{}", inner.name()),
        }
    }

    /// True for operators satisfying `E[C(x)] = x`.
    pub fn is_unbiased(&self) -> bool {
        matches!(
            self,
            CompressorSpec::Identity
                | CompressorSpec::RandomSparsify { .. }
                | CompressorSpec::RandomDither { .. }
        )
    }

    /// True for operators with a contraction factor `q² < 1`.
    pub fn is_contractive(&self) -> bool {
        !matches!(
            self,
            CompressorSpec::RandomSparsify { .. } | CompressorSpec::RandomDither { .. }
        )
    }

    /// True when the output is a deterministic function of the input.
    pub fn is_deterministic(&self) -> bool {
        matches!(
            self,
            CompressorSpec::Identity | CompressorSpec::TopR { .. } | CompressorSpec::GroupedSign { .. }
        )
    }

    /// Checks the parameters against dimension `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(Error::invalid("d", "dimension must be positive"));
        }
        match self {
            CompressorSpec::Identity => Ok(()),
            CompressorSpec::RandomSparsify { s } => {
                if *s == 0 || *s > d {
                    Err(Error::invalid("s", format!("need 1 <= s <= d = {d}, got {s}")))
                } else {
                    Ok(())
                }
            }
            CompressorSpec::RandomDither { bits } => {
                if *bits == 0 || *bits > MAX_DITHER_BITS {
                    Err(Error::invalid(
                        "bits",
                        format!("need 1 <= bits <= {MAX_DITHER_BITS}, got {bits}"),
                    ))
                } else {
                    Ok(())
                }
            }
            CompressorSpec::TopR { r } => {
                if !(*r > 0.0 && *r <= 1.0) {
                    Err(Error::invalid("r", format!("need 0 < r <= 1, got {r}")))
                } else {
                    Ok(())
                }
            }
            CompressorSpec::GroupedSign { partition } => {
                check_dim(d, partition.dim()).map_err(|_| {
                    Error::invalid(
                        "partition",
                        format!("covers {} coordinates, expected {d}", partition.dim()),
                    )
                })
            }
            CompressorSpec::ScaledUnbiased(inner) => {
                if !inner.is_unbiased() {
                    return Err(Error::invalid(
                        "inner",
                        format!("scaling requires an unbiased operator, got {}", inner.name()),
                    ));
                }
                inner.validate(d)
            }
        }
    }
}

/// Number of coordinates Top-r keeps: `⌈r·d⌉`, with products within
/// `1e-9` (relative) of an integer snapped to it so that e.g. `0.07·100`
/// keeps 7 rather than 8.
pub fn top_r_count(r: f64, d: usize) -> usize {
    let p = r * d as f64;
    let near = p.round();
    let k = if (p - near).abs() <= 1e-9 * p.max(1.0) {
        near
    } else {
        p.ceil()
    };
    (k as usize).clamp(1, d)
}

/// Variance factor `ω` of an unbiased operator.
pub fn omega(spec: &CompressorSpec, d: usize) -> Result<f64> {
    spec.validate(d)?;
    match spec {
        CompressorSpec::Identity => Ok(0.0),
        CompressorSpec::RandomSparsify { s } => Ok(d as f64 / *s as f64 - 1.0),
        CompressorSpec::RandomDither { bits } => {
            let levels = 2f64.powi(*bits as i32);
            let d = d as f64;
            Ok((d / (levels * levels)).min(d.sqrt() / levels))
        }
        other => Err(Error::Unsupported(format!(
            "ω is defined only for unbiased operators, not {}",
            other.name()
        ))),
    }
}

/// Contraction factor `q²` of a contractive operator.
pub fn contraction_q2(spec: &CompressorSpec, d: usize) -> Result<f64> {
    spec.validate(d)?;
    match spec {
        CompressorSpec::Identity => Ok(0.0),
        CompressorSpec::TopR { r } => Ok(1.0 - top_r_count(*r, d) as f64 / d as f64),
        CompressorSpec::GroupedSign { partition } => {
            Ok(1.0 - 1.0 / partition.max_group_len() as f64)
        }
        CompressorSpec::ScaledUnbiased(inner) => {
            let w = omega(inner, d)?;
            Ok(w / (1.0 + w))
        }
        other => Err(Error::Unsupported(format!(
            "q² is undefined for the unscaled unbiased operator {}; wrap it in ScaledUnbiased",
            other.name()
        ))),
    }
}

#[inline]
fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Applies `spec` to `x`. Randomized operators draw only from `rng`.
pub fn compress(
    spec: &CompressorSpec,
    x: &[f64],
    rng: &mut RngStream,
) -> Result<CompressedMessage> {
    let d = x.len();
    spec.validate(d)?;
    Ok(match spec {
        CompressorSpec::Identity => CompressedMessage::Dense { values: x.to_vec() },
        CompressorSpec::RandomSparsify { s } => {
            let mut indices = index::sample(rng, d, *s).into_vec();
            indices.sort_unstable();
            let factor = d as f64 / *s as f64;
            let values = indices.iter().map(|&k| factor * x[k]).collect();
            CompressedMessage::Sparse {
                dim: d,
                indices,
                values,
            }
        }
        CompressorSpec::RandomDither { bits } => dither(x, *bits, rng),
        CompressorSpec::TopR { r } => {
            let k = top_r_count(*r, d);
            let mut order: Vec<usize> = (0..d).collect();
            let by_magnitude = |a: &usize, b: &usize| {
                x[*b].abs()
                    .total_cmp(&x[*a].abs())
                    .then_with(|| a.cmp(b))
            };
            if k < d {
                order.select_nth_unstable_by(k - 1, by_magnitude);
            }
            let mut indices = order[..k].to_vec();
            indices.sort_unstable();
            let values = indices.iter().map(|&i| x[i]).collect();
            CompressedMessage::Sparse {
                dim: d,
                indices,
                values,
            }
        }
        CompressorSpec::GroupedSign { partition } => {
            let norms = partition
                .groups()
                .iter()
                .map(|g| g.iter().map(|&k| x[k].abs()).sum())
                .collect();
            CompressedMessage::GroupSigns {
                partition: partition.clone(),
                norms,
                signs: x.iter().map(|&v| sign(v)).collect(),
            }
        }
        CompressorSpec::ScaledUnbiased(inner) => {
            let factor = 1.0 / (1.0 + omega(inner, d)?);
            let mut msg = compress(inner, x, rng)?;
            msg.scale_magnitudes(factor);
            msg
        }
    })
}

fn dither(x: &[f64], bits: u32, rng: &mut RngStream) -> CompressedMessage {
    let d = x.len();
    let norm = crate::linalg::norm(x);
    if norm == 0.0 {
        return CompressedMessage::Dithered {
            bits,
            norm: 0.0,
            signs: vec![0; d],
            levels: vec![0; d],
        };
    }
    let steps = (1u64 << bits) as f64;
    let top = 1u32 << bits;
    let mut signs = Vec::with_capacity(d);
    let mut levels = Vec::with_capacity(d);
    for &v in x {
        let u = steps * v.abs() / norm;
        let lo = u.floor();
        let hi = u.ceil();
        // P(lo) = ⌈u⌉ − u; one uniform per coordinate keeps the stream aligned
        let draw: f64 = rng.random();
        let level = if draw < hi - u { lo } else { hi };
        let level = (level as u32).min(top);
        signs.push(if level == 0 { 0 } else { sign(v) });
        levels.push(level);
    }
    CompressedMessage::Dithered {
        bits,
        norm,
        signs,
        levels,
    }
}

/// `decode(compress(spec, x))`.
pub fn apply(spec: &CompressorSpec, x: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
    compress(spec, x, rng)?.decode()
}
